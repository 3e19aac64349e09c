#include "codistill/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "codistill/error.hpp"

namespace codistill {

namespace {

constexpr std::string_view kHeader = "CODIST-VOCAB v1";
constexpr std::string_view kMergesSentinel = "#MERGES";
const std::vector<std::string> kSpecialNames = {"[PAD]", "[BOS]", "[EOS]", "[UNK]"};

std::string_view bare(std::string_view token) {
    if (token.starts_with(kContinuation)) token.remove_prefix(kContinuation.size());
    return token;
}

std::vector<std::string> split_words(std::string_view normalized) {
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < normalized.size()) {
        const std::size_t j = std::min(normalized.find(' ', i), normalized.size());
        if (j > i) words.emplace_back(normalized.substr(i, j - i));
        i = j + 1;
    }
    return words;
}

std::vector<std::string> word_symbols(std::string_view word) {
    std::vector<std::string> syms = utf8_chars(word);
    for (std::size_t i = 1; i < syms.size(); ++i) syms[i] = std::string(kContinuation) + syms[i];
    return syms;
}

}  // namespace

std::vector<std::string> utf8_chars(std::string_view word) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < word.size()) {
        const auto lead = static_cast<unsigned char>(word[i]);
        std::size_t len = 1;
        if (lead >= 0xF0 && lead < 0xF8) len = 4;
        else if (lead >= 0xE0) len = 3;
        else if (lead >= 0xC0) len = 2;
        if (len > 1) {
            if (i + len > word.size()) len = 1;
            for (std::size_t k = 1; k < len; ++k)
                if ((static_cast<unsigned char>(word[i + k]) & 0xC0) != 0x80) len = 1;
        }
        out.emplace_back(word.substr(i, len));
        i += len;
    }
    return out;
}

std::string normalize_text(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

TokenId Vocab::id_of(std::string_view token) const {
    auto it = index_.find(token);
    return it == index_.end() ? -1 : it->second;
}

const std::string& Vocab::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw Error("unknown token id");
    return tokens_[static_cast<std::size_t>(id)];
}

void Vocab::add_token(std::string token) {
    if (index_.contains(token)) return;
    max_token_chars_ = std::max(max_token_chars_, utf8_chars(bare(token)).size());
    index_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(token));
}

TokenSeq Vocab::encode(std::string_view text) const {
    TokenSeq out;
    const std::string norm = normalize_text(text);
    for (const auto& word : split_words(norm)) {
        const auto chars = utf8_chars(word);
        std::size_t i = 0;
        while (i < chars.size()) {
            std::size_t take = std::min(max_token_chars_, chars.size() - i);
            TokenId found = -1;
            for (; take > 0; --take) {
                std::string cand = i == 0 ? std::string() : std::string(kContinuation);
                for (std::size_t k = 0; k < take; ++k) cand += chars[i + k];
                found = id_of(cand);
                if (found >= 0) break;
            }
            if (found < 0) {
                out.push_back(kUnk);
                ++i;
            } else {
                out.push_back(found);
                i += take;
            }
        }
    }
    return out;
}

std::string Vocab::decode(std::span<const TokenId> seq) const {
    std::string out;
    for (TokenId id : seq) {
        const std::string& tok = token(id);
        if (id == kPad || id == kBos || id == kEos) continue;
        if (id == kUnk) {
            out += kUnkMarker;
        } else if (tok.starts_with(kContinuation)) {
            out += bare(tok);
        } else {
            if (!out.empty()) out.push_back(' ');
            out += tok;
        }
    }
    return out;
}

std::string Vocab::serialize() const {
    std::string out(kHeader);
    out.push_back('\n');
    for (const auto& t : tokens_) out += t + '\n';
    out += kMergesSentinel;
    out.push_back('\n');
    for (const auto& [l, r] : merges_) out += l + ' ' + r + '\n';
    return out;
}

Vocab Vocab::deserialize(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || line != kHeader) throw Error("invalid vocab header");
    Vocab v;
    bool in_merges = false;
    while (std::getline(in, line)) {
        if (!in_merges && line == kMergesSentinel) {
            in_merges = true;
            continue;
        }
        if (in_merges) {
            const auto sp = line.find(' ');
            if (sp == std::string::npos) throw Error("invalid vocab merge line: " + line);
            v.merges_.emplace_back(line.substr(0, sp), line.substr(sp + 1));
        } else {
            if (v.index_.contains(line)) throw Error("duplicate vocab token: " + line);
            v.add_token(line);
        }
    }
    if (!in_merges) throw Error("vocab missing merges section");
    for (std::size_t i = 0; i < kNumSpecials; ++i)
        if (v.tokens_.size() <= i || v.tokens_[i] != kSpecialNames[i]) throw Error("vocab specials corrupted");
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write vocab: " + path);
    f << serialize();
    if (!f) throw Error("cannot write vocab: " + path);
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot read vocab: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize(ss.str());
}

Vocab train_vocab(std::span<const std::vector<std::string>> corpora, std::size_t target_size) {
    std::map<std::string, std::size_t> word_counts;
    for (const auto& corpus : corpora)
        for (const auto& text : corpus)
            for (auto& w : split_words(normalize_text(text))) ++word_counts[w];
    if (word_counts.empty()) throw Error("empty corpus");

    std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
    std::set<std::string> base;
    for (const auto& [w, n] : word_counts) {
        auto syms = word_symbols(w);
        base.insert(syms.begin(), syms.end());
        words.emplace_back(std::move(syms), n);
    }
    if (target_size < base.size() + kNumSpecials) throw Error("vocab too small");

    Vocab v;
    for (const auto& s : kSpecialNames) v.add_token(s);
    for (const auto& s : base) v.add_token(s);

    using PairKey = std::pair<std::string, std::string>;
    while (v.size() < target_size) {
        std::map<PairKey, std::size_t> counts;
        for (const auto& [syms, n] : words)
            for (std::size_t i = 0; i + 1 < syms.size(); ++i) counts[{syms[i], syms[i + 1]}] += n;
        if (counts.empty()) break;

        const PairKey* best = nullptr;
        std::size_t best_count = 0;
        auto key = [](const PairKey& p) { return std::tuple(bare(p.first), bare(p.second), p.first, p.second); };
        for (const auto& [pair, n] : counts) {
            if (n > best_count || (n == best_count && key(pair) < key(*best))) {
                best = &pair;
                best_count = n;
            }
        }
        const PairKey merge = *best;
        std::string merged = merge.first + std::string(bare(merge.second));
        for (auto& [syms, n] : words) {
            std::vector<std::string> next;
            next.reserve(syms.size());
            for (std::size_t i = 0; i < syms.size(); ++i) {
                if (i + 1 < syms.size() && syms[i] == merge.first && syms[i + 1] == merge.second) {
                    next.push_back(merged);
                    ++i;
                } else {
                    next.push_back(syms[i]);
                }
            }
            syms = std::move(next);
        }
        v.merges_.push_back(merge);
        v.add_token(std::move(merged));
    }
    return v;
}

}  // namespace codistill
