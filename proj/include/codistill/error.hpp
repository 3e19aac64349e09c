#pragma once

#include <stdexcept>
#include <string>

namespace codistill {

// Single exception type for every recoverable failure in the library. The
// message is the contract: callers (and tests) match on it.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace codistill
