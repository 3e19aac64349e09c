#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace codistill {

using TokenId = int;

/// Content token ids of one caption; BOS/EOS are added by consumers.
using TokenSeq = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::size_t kNumSpecials = 4;

/// Prefix marking a word-internal (non-initial) subword.
inline constexpr std::string_view kContinuation = "##";
/// Literal emitted by decode() for UNK.
inline constexpr std::string_view kUnkMarker = "⟨unk⟩";

/// Lowercase, collapse whitespace runs to one space, trim.
std::string normalize_text(std::string_view text);

/// Joint subword vocabulary learned by byte-pair merging over whole words.
///
/// Word-initial subwords are stored bare, non-initial ones carry the "##"
/// prefix, so decoding restores word boundaries without extra markers. Ids
/// 0..3 are PAD, BOS, EOS, UNK; then the base symbols in sorted order; then
/// one id per merge that produced a new token.
class Vocab {
public:
    using Merge = std::pair<std::string, std::string>;

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::vector<Merge>& merges() const { return merges_; }

    /// Id of a subword string (with "##" prefix when non-initial), or -1.
    TokenId id_of(std::string_view token) const;
    const std::string& token(TokenId id) const;

    TokenSeq encode(std::string_view text) const;
    /// Throws Error("unknown token id") for ids outside the vocabulary.
    std::string decode(std::span<const TokenId> seq) const;

    /// Line-oriented "CODIST-VOCAB v1" format.
    std::string serialize() const;
    static Vocab deserialize(std::string_view text);
    void save(const std::string& path) const;
    static Vocab load(const std::string& path);

    friend Vocab train_vocab(std::span<const std::vector<std::string>> corpora, std::size_t target_size);

private:
    void add_token(std::string token);

    std::vector<std::string> tokens_;
    std::map<std::string, TokenId, std::less<>> index_;
    std::vector<Merge> merges_;
    std::size_t max_token_chars_ = 1;
};

/// Learns merges over the union of `corpora` until the vocabulary holds
/// `target_size` tokens or no adjacent pair remains. Equal pair counts break
/// toward the lexicographically smallest pair of bare strings.
/// Throws Error("empty corpus") or Error("vocab too small").
Vocab train_vocab(std::span<const std::vector<std::string>> corpora, std::size_t target_size);

/// Splits a UTF-8 word into code points (invalid bytes become single units).
std::vector<std::string> utf8_chars(std::string_view word);

}  // namespace codistill
