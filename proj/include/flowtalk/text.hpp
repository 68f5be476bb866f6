#pragma once

// Character-level text input. Inputs are assumed pre-romanized; the map
// covers printable ASCII, with one reserved id for unknown characters and
// one for the filler that pads token sequences to the audio frame count.

#include <string>
#include <vector>

namespace flowtalk::features {

struct Vocab {
    static constexpr int kFirstChar = 32;   // space
    static constexpr int kLastChar = 126;   // '~'
    static constexpr int kUnknownId = 95;
    static constexpr int kFillerId = 96;
    static constexpr int kSize = 97;

    int size() const { return kSize; }
    int filler_id() const { return kFillerId; }
    int unknown_id() const { return kUnknownId; }

    int char_to_id(char c) const {
        const unsigned char u = static_cast<unsigned char>(c);
        if (u >= kFirstChar && u <= kLastChar) return int(u) - kFirstChar;
        return kUnknownId;
    }
    // inverse of char_to_id on the printable range; reserved ids get markers
    char id_to_char(int id) const;
};

struct TokenSequence {
    std::vector<int> ids;
    int vocab_size = Vocab::kSize;
    int filler_id = Vocab::kFillerId;
};

// reference chars ++ driving chars ++ filler, padded to target_len.
TokenSequence tokenize(const std::string& reference_text, const std::string& driving_text,
                       size_t target_len, const Vocab& vocab);

// Drops filler and inverse-maps the remaining ids back to characters.
std::string detokenize(const TokenSequence& tokens, const Vocab& vocab);

}  // namespace flowtalk::features
