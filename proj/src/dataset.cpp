#include "rope/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "rope/rng.hpp"

namespace rope {

namespace {
constexpr char kMagic[4] = {'R', 'P', 'D', '1'};

enum DatasetStream : std::uint64_t { kThetaDraw = 11, kSimDraw = 12, kShuffle = 13 };

template <class T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace

Dataset generate_dataset(Task task, std::int64_t n, std::uint64_t seed, bool misspecified,
                         const std::optional<ThetaBox>& theta_box) {
  if (n < 0) throw std::invalid_argument("generate_dataset: negative size");
  const TaskSpec& spec = task_spec(task);
  Dataset ds;
  ds.task = task;
  ds.provenance = misspecified ? Provenance::real : Provenance::simulated;
  ds.role = SplitRole::train;
  ds.n = n;
  ds.theta_dim = spec.theta_dim;
  ds.obs_dim = spec.obs_dim;
  ds.seed = seed;
  ds.theta.resize(static_cast<std::size_t>(n * spec.theta_dim));
  ds.obs.resize(static_cast<std::size_t>(n * spec.obs_dim));

  const std::vector<double>& lo = theta_box ? theta_box->lo : spec.theta_lo;
  const std::vector<double>& hi = theta_box ? theta_box->hi : spec.theta_hi;
  if (lo.size() != static_cast<std::size_t>(spec.theta_dim) || hi.size() != lo.size())
    throw std::invalid_argument("generate_dataset: theta box has wrong dimension");

  auto theta_rng = make_rng(seed, kThetaDraw);
  for (std::int64_t i = 0; i < n; ++i) {
    double* row = ds.theta.data() + i * spec.theta_dim;
    for (int j = 0; j < spec.theta_dim; ++j)
      row[j] = uniform_real(theta_rng, lo[static_cast<std::size_t>(j)],
                            hi[static_cast<std::size_t>(j)]);
    const auto obs = simulate(task, {row, static_cast<std::size_t>(spec.theta_dim)},
                              mix_seed(mix_seed(seed, kSimDraw), static_cast<std::uint64_t>(i)),
                              misspecified);
    std::copy(obs.values.begin(), obs.values.end(), ds.obs.begin() + i * spec.obs_dim);
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path.string());
  out.write(kMagic, 4);
  write_pod(out, static_cast<std::uint32_t>(ds.task));
  write_pod(out, static_cast<std::uint32_t>(ds.provenance));
  write_pod(out, static_cast<std::uint32_t>(ds.role));
  write_pod(out, ds.theta_dim);
  write_pod(out, ds.obs_dim);
  write_pod(out, ds.n);
  write_pod(out, ds.seed);
  for (std::int64_t i = 0; i < ds.n; ++i) {
    out.write(reinterpret_cast<const char*>(ds.theta.data() + i * ds.theta_dim),
              static_cast<std::streamsize>(sizeof(double)) * ds.theta_dim);
    out.write(reinterpret_cast<const char*>(ds.obs.data() + i * ds.obs_dim),
              static_cast<std::streamsize>(sizeof(double)) * ds.obs_dim);
  }
  if (!out) throw std::runtime_error("save_dataset: write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("load_dataset: " + path.string() + " is not a dataset file");
  std::uint32_t task_u, prov_u, role_u;
  read_pod(in, task_u);
  read_pod(in, prov_u);
  read_pod(in, role_u);
  Dataset ds;
  if (task_u > 2 || prov_u > 1 || role_u > 3)
    throw std::runtime_error("load_dataset: corrupt header in " + path.string());
  ds.task = static_cast<Task>(task_u);
  ds.provenance = static_cast<Provenance>(prov_u);
  ds.role = static_cast<SplitRole>(role_u);
  read_pod(in, ds.theta_dim);
  read_pod(in, ds.obs_dim);
  read_pod(in, ds.n);
  read_pod(in, ds.seed);
  if (!in || ds.n < 0 || ds.theta_dim <= 0 || ds.obs_dim <= 0)
    throw std::runtime_error("load_dataset: corrupt header in " + path.string());
  ds.theta.resize(static_cast<std::size_t>(ds.n * ds.theta_dim));
  ds.obs.resize(static_cast<std::size_t>(ds.n * ds.obs_dim));
  for (std::int64_t i = 0; i < ds.n; ++i) {
    in.read(reinterpret_cast<char*>(ds.theta.data() + i * ds.theta_dim),
            static_cast<std::streamsize>(sizeof(double)) * ds.theta_dim);
    in.read(reinterpret_cast<char*>(ds.obs.data() + i * ds.obs_dim),
            static_cast<std::streamsize>(sizeof(double)) * ds.obs_dim);
  }
  if (!in) throw std::runtime_error("load_dataset: truncated file " + path.string());
  return ds;
}

Dataset subset(const Dataset& ds, std::span<const std::int64_t> indices, SplitRole role) {
  Dataset out;
  out.task = ds.task;
  out.provenance = ds.provenance;
  out.role = role;
  out.n = static_cast<std::int64_t>(indices.size());
  out.theta_dim = ds.theta_dim;
  out.obs_dim = ds.obs_dim;
  out.seed = ds.seed;
  out.theta.resize(static_cast<std::size_t>(out.n * out.theta_dim));
  out.obs.resize(static_cast<std::size_t>(out.n * out.obs_dim));
  for (std::int64_t i = 0; i < out.n; ++i) {
    const std::int64_t src = indices[static_cast<std::size_t>(i)];
    if (src < 0 || src >= ds.n) throw std::out_of_range("subset: index outside dataset");
    std::copy_n(ds.theta.begin() + src * ds.theta_dim, ds.theta_dim,
                out.theta.begin() + i * ds.theta_dim);
    std::copy_n(ds.obs.begin() + src * ds.obs_dim, ds.obs_dim, out.obs.begin() + i * ds.obs_dim);
  }
  return out;
}

Splits make_splits(const Dataset& real_pairs, std::int64_t n_calibration, std::int64_t n_test,
                   std::uint64_t seed) {
  if (n_calibration < 0 || n_test < 0)
    throw std::invalid_argument("make_splits: negative split size");
  if (n_calibration + n_test > real_pairs.n)
    throw std::invalid_argument("make_splits: requested " + std::to_string(n_calibration) +
                                " + " + std::to_string(n_test) + " pairs from a pool of " +
                                std::to_string(real_pairs.n));
  std::vector<std::int64_t> order(static_cast<std::size_t>(real_pairs.n));
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, kShuffle);
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[uniform_index(rng, i)]);

  const std::int64_t n_val = n_calibration / 5;  // the 20% validation share
  const std::int64_t n_train = n_calibration - n_val;
  Splits s;
  s.calibration = subset(real_pairs, {order.data(), static_cast<std::size_t>(n_train)},
                         SplitRole::calibration);
  s.calibration_val =
      subset(real_pairs, {order.data() + n_train, static_cast<std::size_t>(n_val)},
             SplitRole::calibration_val);
  s.test = subset(real_pairs, {order.data() + n_calibration, static_cast<std::size_t>(n_test)},
                  SplitRole::test);
  return s;
}

}  // namespace rope
