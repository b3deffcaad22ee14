// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <functional>
#include <vector>

#include <unistd.h>

#include "lgfd/rng.hpp"
#include "lgfd/tensor.hpp"

namespace lgfd::test {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

/// Largest relative error between the analytic gradient of `f` with respect
/// to each input and central differences with step h.
inline double max_fd_error(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-6,
                           double floor = 1e-8) {
  for (auto& t : inputs) t.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    std::vector<double> g(t.grad().begin(), t.grad().end());
    if (g.empty()) g.assign(static_cast<std::size_t>(t.numel()), 0.0);
    analytic.push_back(std::move(g));
  }
  double worst = 0.0;
  NoGradGuard guard;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto d = inputs[i].data();
    for (std::size_t k = 0; k < d.size(); ++k) {
      const double orig = d[k];
      d[k] = orig + h;
      const double fp = f().item();
      d[k] = orig - h;
      const double fm = f().item();
      d[k] = orig;
      const double n = (fp - fm) / (2 * h);
      const double a = analytic[i][k];
      worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
    }
  }
  return worst;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("lgfd_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

}  // namespace lgfd::test
