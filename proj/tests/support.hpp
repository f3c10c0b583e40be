#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "gmlfm/data.hpp"
#include "gmlfm/model.hpp"

namespace gmlfm::testing {

inline void fill_uniform(std::vector<double>& xs, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& x : xs) x = u(rng);
}

/// Every learnable entry uniform in [-scale, scale].
inline model::ModelParams random_params(std::size_t n, std::size_t k, const model::DistanceSpec& spec,
                                        std::mt19937_64& rng, double scale = 1.0) {
  auto p = model::ModelParams::zeros(n, k, spec);
  std::uniform_real_distribution<double> u(-scale, scale);
  p.w0 = u(rng);
  fill_uniform(p.w, rng, -scale, scale);
  fill_uniform(p.V.data(), rng, -scale, scale);
  fill_uniform(p.h, rng, -scale, scale);
  fill_uniform(p.L.data(), rng, -scale, scale);
  for (auto& layer : p.mlp) {
    fill_uniform(layer.weight.data(), rng, -scale, scale);
    fill_uniform(layer.bias, rng, -scale, scale);
  }
  return p;
}

/// m distinct sorted indices below n with values in [lo, hi].
inline std::vector<data::Entry> random_active(std::size_t m, std::size_t n, std::mt19937_64& rng,
                                              double lo = -1.0, double hi = 1.0) {
  std::vector<std::uint32_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::uint32_t>(i);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<data::Entry> out;
  for (auto i : idx) out.push_back({i, u(rng)});
  return out;
}

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max(1.0, std::abs(b));
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("gmlfm_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
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

  std::filesystem::path write(const std::string& name, const std::string& text) const {
    const auto p = path_ / name;
    std::ofstream(p) << text;
    return p;
  }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace gmlfm::testing
