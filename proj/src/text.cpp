#include "flowtalk/text.hpp"

#include "flowtalk/common.hpp"

namespace flowtalk::features {

char Vocab::id_to_char(int id) const {
    if (id < 0 || id >= kSize) throw ValidationError(strf("vocab: id %d out of range", id));
    if (id == kUnknownId) return '\x1a';  // substitute marker, outside the mapped range
    if (id == kFillerId) return '\0';
    return char(id + kFirstChar);
}

TokenSequence tokenize(const std::string& reference_text, const std::string& driving_text,
                       size_t target_len, const Vocab& vocab) {
    const size_t need = reference_text.size() + driving_text.size();
    if (target_len < need)
        throw ValidationError(strf("tokenize: target length %zu is below the %zu characters provided",
                                   target_len, need));
    TokenSequence seq;
    seq.vocab_size = vocab.size();
    seq.filler_id = vocab.filler_id();
    seq.ids.reserve(target_len);
    for (char c : reference_text) seq.ids.push_back(vocab.char_to_id(c));
    for (char c : driving_text) seq.ids.push_back(vocab.char_to_id(c));
    seq.ids.resize(target_len, vocab.filler_id());
    return seq;
}

std::string detokenize(const TokenSequence& tokens, const Vocab& vocab) {
    std::string out;
    out.reserve(tokens.ids.size());
    for (int id : tokens.ids) {
        if (id == tokens.filler_id) continue;
        out.push_back(vocab.id_to_char(id));
    }
    return out;
}

}  // namespace flowtalk::features
