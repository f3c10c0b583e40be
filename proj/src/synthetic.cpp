#include "gmlfm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "gmlfm/linalg.hpp"

namespace gmlfm::synthetic {

void write_tabular(std::ostream& out, const Config& c) {
  if (c.users == 0 || c.items == 0 || c.latent_dim == 0 || c.categories == 0 || c.levels == 0)
    throw std::invalid_argument("synthetic: sizes must be positive");
  if (c.min_per_user < 2 || c.min_per_user > c.max_per_user || c.max_per_user >= c.items)
    throw std::invalid_argument("synthetic: need 2 <= min_per_user <= max_per_user < items");

  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = c.latent_dim;
  auto random_matrix = [&](double scale) {
    Matrix m(d, d);
    for (double& x : m.data()) x = scale * normal(rng);
    return m;
  };

  const Matrix mixing = random_matrix(1.0 / std::sqrt(static_cast<double>(d)));
  const Matrix response = random_matrix(1.5 / std::sqrt(static_cast<double>(d)));

  // Item features: correlated latent z, nonlinear response tanh(B z).
  std::vector<std::vector<double>> item_response(c.items);
  std::vector<double> popularity(c.items);
  std::vector<std::size_t> category(c.items);
  std::vector<std::vector<double>> projected(c.attributes, std::vector<double>(c.items));
  const Matrix projections = [&] {
    Matrix m(c.attributes, d);
    for (double& x : m.data()) x = normal(rng);
    return m;
  }();
  const Matrix centroids = [&] {
    Matrix m(c.categories, d);
    for (double& x : m.data()) x = normal(rng);
    return m;
  }();
  for (std::size_t i = 0; i < c.items; ++i) {
    std::vector<double> g(d);
    for (double& x : g) x = normal(rng);
    const auto z = matvec(mixing, g);
    auto r = matvec(response, z);
    for (double& x : r) x = std::tanh(x);
    item_response[i] = std::move(r);
    popularity[i] = 0.5 * normal(rng);
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t cat = 0; cat < c.categories; ++cat) {
      const double s = dot(centroids.row(cat), z);
      if (s > best_score) {
        best_score = s;
        best = cat;
      }
    }
    category[i] = best;
    for (std::size_t a = 0; a < c.attributes; ++a) projected[a][i] = dot(projections.row(a), z);
  }

  // Equal-frequency buckets of each projection.
  std::vector<std::vector<std::size_t>> level(c.attributes, std::vector<std::size_t>(c.items));
  for (std::size_t a = 0; a < c.attributes; ++a) {
    std::vector<std::size_t> order(c.items);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return projected[a][x] < projected[a][y] || (projected[a][x] == projected[a][y] && x < y);
    });
    for (std::size_t r = 0; r < c.items; ++r) level[a][order[r]] = r * c.levels / c.items;
  }

  out << "user\titem\tcategory";
  for (std::size_t a = 0; a < c.attributes; ++a) out << "\tattr" << a + 1;
  out << "\tlabel\ttimestamp\n";
  std::uniform_int_distribution<std::size_t> count_dist(c.min_per_user, c.max_per_user);
  std::extreme_value_distribution<double> gumbel(0.0, 1.0);
  std::vector<double> u(d);
  std::vector<std::pair<double, std::size_t>> keys(c.items);
  for (std::size_t user = 0; user < c.users; ++user) {
    for (double& x : u) x = normal(rng);
    const std::size_t count = count_dist(rng);
    // Gumbel top-k: sampling without replacement from softmax(s / T).
    for (std::size_t i = 0; i < c.items; ++i) {
      const double s = dot(u, item_response[i]) + popularity[i];
      keys[i] = {s / c.temperature + gumbel(rng), i};
    }
    std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(count), keys.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<std::int64_t> stamps(count);
    std::iota(stamps.begin(), stamps.end(), 1);
    std::shuffle(stamps.begin(), stamps.end(), rng);
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t item = keys[j].second;
      out << 'u' << user << "\ti" << item << "\tc" << category[item];
      for (std::size_t a = 0; a < c.attributes; ++a) out << "\ta" << a + 1 << '_' << level[a][item];
      out << "\t1\t" << 1000000 + stamps[j] << '\n';
    }
  }
}

void write_tabular(const std::filesystem::path& path, const Config& config) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_tabular(out, config);
}

}  // namespace gmlfm::synthetic
