#pragma once

/// @file glob.hpp
/// @brief Path-glob matching and pattern/pattern intersection tests.
///
/// Patterns are matched against slash-separated paths or plain filenames.
///  - '*' matches any run of characters (including empty) not crossing '/'
///  - '?' matches exactly one character that is not '/'
/// Everything else matches literally.

#include <string>
#include <string_view>
#include <vector>

namespace situ {

/// True iff @p lit (a literal path, no wildcards interpreted) matches @p pat.
inline bool glob_match(std::string_view pat, std::string_view lit) {
  size_t p = 0, l = 0;
  size_t star_p = std::string_view::npos, star_l = 0;
  while (l < lit.size()) {
    if (p < pat.size() && (pat[p] == lit[l] && pat[p] != '*')) {
      ++p, ++l;
    } else if (p < pat.size() && pat[p] == '?' && lit[l] != '/') {
      ++p, ++l;
    } else if (p < pat.size() && pat[p] == '*') {
      star_p = p++;
      star_l = l;  // star currently matches empty
    } else if (star_p != std::string_view::npos && lit[star_l] != '/') {
      // grow the last star by one character and retry
      p = star_p + 1;
      l = ++star_l;
    } else {
      return false;
    }
  }
  while (p < pat.size() && pat[p] == '*') ++p;
  return p == pat.size();
}

namespace detail {

inline bool inter_rec(std::string_view a, std::string_view b, size_t i, size_t j,
                      std::vector<signed char>& memo) {
  const size_t cols = b.size() + 1;
  signed char& slot = memo[i * cols + j];
  if (slot != -1) return slot != 0;
  bool r = false;
  const bool ae = i == a.size(), be = j == b.size();
  if (ae && be) {
    r = true;
  } else if (ae) {
    r = b[j] == '*' && inter_rec(a, b, i, j + 1, memo);
  } else if (be) {
    r = a[i] == '*' && inter_rec(a, b, i + 1, j, memo);
  } else {
    const char ca = a[i], cb = b[j];
    if (ca == '*' && cb == '*') {
      // a common witness can always be rebuilt advancing one star at a time
      r = inter_rec(a, b, i + 1, j, memo) || inter_rec(a, b, i, j + 1, memo);
    } else if (ca == '*') {
      r = inter_rec(a, b, i + 1, j, memo);  // star takes empty
      if (!r && cb != '/')                  // or absorbs whatever b consumes next
        r = inter_rec(a, b, i, j + 1, memo);
    } else if (cb == '*') {
      r = inter_rec(a, b, i, j + 1, memo);
      if (!r && ca != '/') r = inter_rec(a, b, i + 1, j, memo);
    } else if (ca == '?' && cb == '?') {
      r = inter_rec(a, b, i + 1, j + 1, memo);
    } else if (ca == '?') {
      r = cb != '/' && inter_rec(a, b, i + 1, j + 1, memo);
    } else if (cb == '?') {
      r = ca != '/' && inter_rec(a, b, i + 1, j + 1, memo);
    } else {
      r = ca == cb && inter_rec(a, b, i + 1, j + 1, memo);
    }
  }
  slot = r ? 1 : 0;
  return r;
}

}  // namespace detail

/// True iff some literal path is matched by both patterns.
inline bool patterns_intersect(std::string_view a, std::string_view b) {
  std::vector<signed char> memo((a.size() + 1) * (b.size() + 1), -1);
  return detail::inter_rec(a, b, 0, 0, memo);
}

}  // namespace situ
