#include "mta/rouge.hpp"

#include <algorithm>

#include "mta/tensor.hpp"

namespace mta {

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  if (reference.empty()) throw Error("rouge_l: empty reference");
  RougeScore s;
  if (candidate.empty()) return s;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return s;
  s.precision = lcs / static_cast<double>(candidate.size());
  s.recall = lcs / static_cast<double>(reference.size());
  // 2PR / (P + R) with the common factor cancelled; one rounding.
  s.f1 = 2.0 * lcs / static_cast<double>(candidate.size() + reference.size());
  return s;
}

}  // namespace mta
