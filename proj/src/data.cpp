#include "fada/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fada {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

DomainDataset gen_rotated_moons(std::size_t n, double rotation_deg, double noise_sigma,
                                std::uint64_t seed) {
  if (n % 2 != 0) throw std::invalid_argument("gen_rotated_moons: n must be even");
  if (noise_sigma < 0.0) throw std::invalid_argument("gen_rotated_moons: noise_sigma must be >= 0");

  RngStream rng = RngStream::derive(seed, "moons");
  const double theta = rotation_deg * kPi / 180.0;
  const double ct = std::cos(theta), st = std::sin(theta);

  DomainDataset ds;
  ds.features = Matrix(n, 2);
  ds.labels = std::vector<int>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = i < n / 2 ? 0 : 1;
    const double t = rng.uniform01() * kPi;
    double x, y;
    if (label == 0) {
      x = std::cos(t);
      y = std::sin(t);
    } else {
      x = 1.0 - std::cos(t);
      y = 0.5 - std::sin(t);
    }
    x += noise_sigma * rng.normal();
    y += noise_sigma * rng.normal();
    ds.features.at(i, 0) = ct * x - st * y;
    ds.features.at(i, 1) = st * x + ct * y;
    (*ds.labels)[i] = label;
  }
  return ds;
}

DomainDataset gen_shifted_gaussians(std::size_t n, std::size_t classes,
                                    const std::vector<double>& mean_shift, double cov_scale,
                                    std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("gen_shifted_gaussians: need K >= 2");
  const std::size_t d = mean_shift.empty() ? 2 : mean_shift.size();
  if (d < 2) throw std::invalid_argument("gen_shifted_gaussians: need at least 2 dimensions");

  RngStream rng = RngStream::derive(seed, "gaussians");
  DomainDataset ds;
  ds.features = Matrix(n, d);
  ds.labels = std::vector<int>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = static_cast<std::size_t>(rng.uniform_index(classes));
    const double angle = 2.0 * kPi * static_cast<double>(k) / static_cast<double>(classes);
    for (std::size_t j = 0; j < d; ++j) {
      double mean = j == 0 ? 2.0 * std::cos(angle) : (j == 1 ? 2.0 * std::sin(angle) : 0.0);
      if (!mean_shift.empty()) mean += mean_shift[j];
      ds.features.at(i, j) = mean + cov_scale * rng.normal();
    }
    (*ds.labels)[i] = static_cast<int>(k);
  }
  return ds;
}

SplitPair split_dataset(const DomainDataset& ds, double eval_fraction, std::uint64_t seed) {
  if (eval_fraction < 0.0 || eval_fraction >= 1.0) {
    throw std::invalid_argument("split_dataset: eval_fraction must be in [0,1)");
  }
  const std::size_t n = ds.size();
  const auto n_eval = static_cast<std::size_t>(
      std::ceil(eval_fraction * static_cast<double>(n)));
  RngStream rng = RngStream::derive(seed, "split");
  auto perm = rng.permutation(static_cast<std::uint32_t>(n));

  SplitPair out;
  out.train.domain_id = ds.domain_id;
  out.eval.domain_id = ds.domain_id;
  out.train.split = SplitTag::train;
  out.eval.split = SplitTag::eval;
  out.train.features = Matrix(n - n_eval, ds.features.cols);
  out.eval.features = Matrix(n_eval, ds.features.cols);
  if (ds.labels) {
    out.train.labels = std::vector<int>(n - n_eval);
    out.eval.labels = std::vector<int>(n_eval);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = perm[i];
    const bool is_eval = i < n_eval;
    DomainDataset& dst = is_eval ? out.eval : out.train;
    const std::size_t row = is_eval ? i : i - n_eval;
    auto from = ds.features.row(src);
    std::copy(from.begin(), from.end(), dst.features.row(row).begin());
    if (ds.labels) (*dst.labels)[row] = (*ds.labels)[src];
  }
  return out;
}

DomainDataset shuffle_labels(DomainDataset ds, std::uint64_t seed) {
  if (!ds.labels) throw std::invalid_argument("shuffle_labels: dataset is unlabeled");
  RngStream rng = RngStream::derive(seed, "label-shuffle");
  auto perm = rng.permutation(static_cast<std::uint32_t>(ds.labels->size()));
  std::vector<int> shuffled(ds.labels->size());
  for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i] = (*ds.labels)[perm[i]];
  *ds.labels = std::move(shuffled);
  return ds;
}

DomainDataset ingest_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("ingest_csv: cannot open " + path);

  std::string header;
  if (!std::getline(in, header)) throw std::runtime_error("ingest_csv: empty file: " + path);
  if (!header.empty() && header.back() == '\r') header.pop_back();

  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  bool has_label = !cols.empty() && cols.back() == "label";
  const std::size_t d = has_label ? cols.size() - 1 : cols.size();
  if (d == 0) throw std::runtime_error("ingest_csv: no feature columns in header of " + path);
  for (std::size_t i = 0; i < d; ++i) {
    if (cols[i] != "f" + std::to_string(i)) {
      throw std::runtime_error("ingest_csv: unexpected header column '" + cols[i] + "' in " + path);
    }
  }

  std::vector<double> values;
  std::vector<int> labels;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t pos = 0;
        if (col < d) {
          values.push_back(std::stod(cell, &pos));
          if (pos != cell.size()) throw std::invalid_argument("trailing");
        } else {
          labels.push_back(std::stoi(cell, &pos));
          if (pos != cell.size()) throw std::invalid_argument("trailing");
        }
      } catch (const std::exception&) {
        throw std::runtime_error("ingest_csv: malformed value '" + cell + "' at line " +
                                 std::to_string(lineno) + " of " + path);
      }
      ++col;
    }
    if (col != cols.size()) {
      throw std::runtime_error("ingest_csv: expected " + std::to_string(cols.size()) +
                               " columns, got " + std::to_string(col) + " at line " +
                               std::to_string(lineno) + " of " + path);
    }
  }
  const std::size_t n = values.size() / d;
  if (n == 0) throw std::runtime_error("ingest_csv: no data rows in " + path);

  DomainDataset ds;
  ds.features = Matrix(n, d, std::move(values));
  if (has_label) ds.labels = std::move(labels);
  return ds;
}

void export_csv(const DomainDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);  // binary keeps LF endings everywhere
  if (!out) throw std::runtime_error("export_csv: cannot open " + path);
  for (std::size_t j = 0; j < ds.features.cols; ++j) {
    if (j) out << ',';
    out << 'f' << j;
  }
  if (ds.labels) out << ",label";
  out << '\n';
  char buf[40];
  for (std::size_t i = 0; i < ds.features.rows; ++i) {
    for (std::size_t j = 0; j < ds.features.cols; ++j) {
      if (j) out << ',';
      std::snprintf(buf, sizeof(buf), "%.17g", ds.features.at(i, j));
      out << buf;
    }
    if (ds.labels) out << ',' << (*ds.labels)[i];
    out << '\n';
  }
  if (!out) throw std::runtime_error("export_csv: write failed for " + path);
}

}  // namespace fada
