#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "b2p/nn/parameter.hpp"
#include "b2p/tensor.hpp"

namespace b2p::test {

inline Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, float scale = 1.0f) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, scale);
  for (auto& v : t.vec()) v = d(rng);
  return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

// Largest relative error between an analytic gradient and central finite
// differences of loss() with respect to `x`, sampled at up to `samples`
// coordinates.
inline double max_fd_error(Tensor& x, const Tensor& analytic, const std::function<double()>& loss,
                           int samples = 24, float h = 1e-2f, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, x.numel() - 1);
  double worst = 0;
  const int n = static_cast<int>(std::min<std::size_t>(samples, x.numel()));
  for (int s = 0; s < n; ++s) {
    const std::size_t i = x.numel() <= static_cast<std::size_t>(samples) ? s : pick(rng);
    const float orig = x[i];
    x[i] = orig + h;
    const double lp = loss();
    x[i] = orig - h;
    const double lm = loss();
    x[i] = orig;
    const double fd = (lp - lm) / (2.0 * h);
    const double err = std::abs(fd - analytic[i]) / std::max(1e-2, std::abs(fd) + std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("b2p-" + tag + "-" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace b2p::test

namespace b2p::test {

// Fourth-order central difference of f along coordinate i of x.
template <typename F>
double central_diff5(std::vector<double>& x, std::size_t i, double h, F&& f) {
  const double orig = x[i];
  auto at = [&](double d) {
    x[i] = orig + d;
    const double v = f(x);
    x[i] = orig;
    return v;
  };
  return (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
}

inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace b2p::test
