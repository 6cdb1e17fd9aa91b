#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fada/matrix.hpp"
#include "fada/rng.hpp"

namespace fada {

enum class SplitTag { train, eval };

/// One domain's sample. Labels are present for sources and for the target's
/// oracle evaluation split only; a target train split is unlabeled.
struct DomainDataset {
  std::string domain_id;
  Matrix features;
  std::optional<std::vector<int>> labels;
  SplitTag split = SplitTag::train;

  std::size_t size() const { return features.rows; }
  bool labeled() const { return labels.has_value(); }
};

/// Interleaved half-circles with balanced labels (n/2 each), Gaussian noise,
/// rotated by rotation_deg about the origin. n must be even.
DomainDataset gen_rotated_moons(std::size_t n, double rotation_deg, double noise_sigma,
                                std::uint64_t seed);

/// K Gaussian blobs on a circle of radius 2; `mean_shift` translates every
/// class mean, creating domain shift of a known magnitude. The underlying
/// draws depend only on the seed, so two domains at different shifts from the
/// same seed are exact translations of each other.
DomainDataset gen_shifted_gaussians(std::size_t n, std::size_t classes,
                                    const std::vector<double>& mean_shift, double cov_scale,
                                    std::uint64_t seed);

/// Disjoint, exhaustive split; eval takes ceil(eval_fraction * n) rows chosen
/// by a seeded shuffle.
struct SplitPair {
  DomainDataset train;
  DomainDataset eval;
};
SplitPair split_dataset(const DomainDataset& ds, double eval_fraction, std::uint64_t seed);

/// Replaces the labels with a seeded permutation of themselves (fault
/// injection for negative-transfer experiments).
DomainDataset shuffle_labels(DomainDataset ds, std::uint64_t seed);

/// CSV schema: header `f0,...,f{d-1}[,label]`, UTF-8, LF line endings.
/// Malformed rows report their line number. An empty file is an error.
DomainDataset ingest_csv(const std::string& path);
void export_csv(const DomainDataset& ds, const std::string& path);

}  // namespace fada
