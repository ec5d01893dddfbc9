#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mta/tensor.hpp"

namespace mta::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("mta-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace mta::testing
