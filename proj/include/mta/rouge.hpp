#pragma once

#include <string>
#include <vector>

namespace mta {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// LCS-based ROUGE-L over word sequences, F1 with beta = 1. An empty candidate
// scores zero; an empty reference is rejected.
RougeScore rouge_l(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);

}  // namespace mta
