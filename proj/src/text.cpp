#include "psypipe/text.hpp"

#include <cctype>

namespace psypipe::text {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

}  // namespace

std::string to_lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::vector<std::string> tokenize(std::string_view s) {
    std::vector<std::string> out;
    size_t i = 0;
    const size_t n = s.size();
    while (i < n) {
        while (i < n && is_space(s[i])) ++i;
        size_t j = i;
        while (j < n && !is_space(s[j])) ++j;
        if (j > i) {
            size_t b = i, e = j;
            while (b < e && is_punct(s[b])) ++b;
            while (e > b && is_punct(s[e - 1])) --e;
            if (e > b) out.push_back(to_lower(s.substr(b, e - b)));
        }
        i = j;
    }
    return out;
}

std::unordered_set<std::string> token_set(std::string_view s) {
    auto toks = tokenize(s);
    return {toks.begin(), toks.end()};
}

std::vector<std::string> split_sentences(std::string_view s) {
    std::vector<std::string> out;
    size_t start = 0;
    const size_t n = s.size();
    for (size_t i = 0; i < n; ++i) {
        char c = s[i];
        if ((c == '.' || c == '!' || c == '?') && (i + 1 == n || is_space(s[i + 1]))) {
            std::string sent = squeeze_ws(s.substr(start, i + 1 - start));
            if (!sent.empty()) out.push_back(std::move(sent));
            start = i + 1;
        }
    }
    if (start < n) {
        std::string tail = squeeze_ws(s.substr(start));
        if (!tail.empty()) out.push_back(std::move(tail));
    }
    return out;
}

double jaccard(const std::unordered_set<std::string>& a,
               const std::unordered_set<std::string>& b) {
    if (a.empty() || b.empty()) return 0.0;
    const auto& small = a.size() <= b.size() ? a : b;
    const auto& large = a.size() <= b.size() ? b : a;
    size_t inter = 0;
    for (const auto& t : small)
        if (large.count(t)) ++inter;
    size_t uni = a.size() + b.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::string squeeze_ws(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool in_ws = true;  // trims leading whitespace
    for (char c : s) {
        if (is_space(c)) {
            in_ws = true;
        } else {
            if (in_ws && !out.empty()) out.push_back(' ');
            out.push_back(c);
            in_ws = false;
        }
    }
    return out;
}

size_t count_words(std::string_view s) {
    size_t count = 0;
    bool in_word = false;
    for (char c : s) {
        bool sp = is_space(c);
        if (!sp && !in_word) ++count;
        in_word = !sp;
    }
    return count;
}

}  // namespace psypipe::text
