#include "codistill/hash.hpp"

#include <cstdio>
#include <fstream>
#include <vector>

#include "codistill/error.hpp"

namespace codistill {

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot read file: " + path);
    std::uint64_t h = kFnvOffset;
    std::vector<char> buf(1 << 16);
    while (f) {
        f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        const auto n = static_cast<std::size_t>(f.gcount());
        h = fnv1a({reinterpret_cast<const unsigned char*>(buf.data()), n}, h);
    }
    return h;
}

}  // namespace codistill
