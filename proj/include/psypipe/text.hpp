#pragma once

#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace psypipe::text {

// Tokenization rule used everywhere a token is counted or compared:
// whitespace split, ASCII lowercase, leading/trailing punctuation stripped.
// Tokens that are empty after stripping are dropped.
std::vector<std::string> tokenize(std::string_view s);

std::unordered_set<std::string> token_set(std::string_view s);

// Sentence boundary: '.', '!' or '?' followed by whitespace (or end of
// input). Deliberately simple so results are reproducible bit for bit;
// abbreviations may over-split.
std::vector<std::string> split_sentences(std::string_view s);

// |A∩B| / |A∪B| over unigram token sets. Both sets must be non-empty.
double jaccard(const std::unordered_set<std::string>& a,
               const std::unordered_set<std::string>& b);

std::string to_lower(std::string_view s);

// Collapses runs of whitespace to single spaces and trims the ends.
std::string squeeze_ws(std::string_view s);

size_t count_words(std::string_view s);

}  // namespace psypipe::text
