#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

namespace gmlfm::synthetic {

/// Implicit-feedback interactions drawn from correlated latent features.
///
/// Items carry a latent vector z = A g with a random mixing matrix A, so the
/// coordinates of z are correlated. A user with latent u prefers items by
/// s(u, i) = u^T tanh(B z_i) + popularity_i, and draws between
/// `min_per_user` and `max_per_user` distinct items from softmax(s / T).
/// Each item also belongs to one of `categories` categories derived from z,
/// and carries `attributes` further item attributes, each a quantile bucket
/// (`levels` levels) of a random projection of z. Because z is correlated,
/// so are the attributes.
struct Config {
  std::size_t users = 2000;
  std::size_t items = 500;
  std::size_t latent_dim = 8;
  std::size_t categories = 20;
  std::size_t attributes = 3;
  std::size_t levels = 5;
  std::size_t min_per_user = 8;
  std::size_t max_per_user = 20;
  double temperature = 0.25;
  std::uint64_t seed = 7;
};

/// Tab-separated with header "user item category attr1.. label timestamp";
/// every row is a positive interaction (label 1) with a per-user timestamp.
void write_tabular(std::ostream& out, const Config& config);
void write_tabular(const std::filesystem::path& path, const Config& config);

}  // namespace gmlfm::synthetic
