#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ddl/diffusion.hpp"
#include "ddl/tensor.hpp"

namespace ddl {

// Distribution distances compare sample sets either in raw coordinates or
// through a small frozen random-feature embedding. The embedding weights are
// fixed by seed and never trained, so metric values are reproducible and no
// pretrained feature extractor is needed at this scale.
enum class FeatureKind { raw, frozen_random };

struct FeatureMapSpec {
    FeatureKind kind = FeatureKind::raw;
    uint64_t seed = 0;
    int out_dim = 16;
};

class FeatureMap {
  public:
    FeatureMap(FeatureMapSpec spec, int in_dim);

    // x is [n, ...]; trailing dims are flattened to in_dim. Returns f64
    // features, [n, in_dim] for raw and [n, out_dim] for frozen_random.
    Tensor apply(const Tensor& x) const;

    int in_dim() const { return in_dim_; }
    int out_dim() const;

  private:
    FeatureMapSpec spec_;
    int in_dim_ = 0;
    Tensor w_, b_, p_;
};

// Frechet distance between gaussian fits of the two feature clouds:
// |mu1-mu2|^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2)), computed through the symmetric
// form C1^(1/2) C2 C1^(1/2) with a cyclic Jacobi eigensolver. Covariances are
// unbiased and get a 1e-6 ridge before the square root. Each set needs at
// least out_dim+1 samples.
double frechet_distance(const Tensor& a, const Tensor& b, const FeatureMap& fm);

// Median of pairwise euclidean distances over the pooled sets (capped at 512
// points per set so the heuristic stays cheap); 1.0 when all points coincide.
double median_bandwidth(const Tensor& a, const Tensor& b);

// Unbiased gaussian-kernel MMD^2 estimate on raw coordinates. May be slightly
// negative by construction. Without an explicit bandwidth the median
// heuristic above is used.
double mmd2_unbiased(const Tensor& a, const Tensor& b,
                     std::optional<double> bandwidth = std::nullopt);

// Fraction of samples whose nearest center lies within radius, per center;
// everything else is background mass. fraction sums to 1 - background.
struct ModeCoverage {
    std::vector<double> fraction;
    double background = 0.0;
};
ModeCoverage mode_coverage(const Tensor& samples, const Tensor& centers, double radius);

// One row per teacher: the teacher's distance to the data (abs) and to the
// student (rel), both under the same feature map. Every sample set must
// cover the identical seed range so rel of a model against itself is 0.
struct RelAbsRow {
    int k = 0;
    double abs_metric = 0.0;
    double rel_metric = 0.0;
};
std::vector<RelAbsRow> rel_abs_sweep(const SampleSet& student,
                                     const std::vector<std::pair<int, SampleSet>>& teachers,
                                     const Tensor& data, const FeatureMap& fm);

// Named metric values plus the sample provenance they were computed from.
struct MetricReport {
    std::vector<std::pair<std::string, double>> values;
    int64_t n = 0;
    uint64_t seed_lo = 0;
    uint64_t seed_hi = 0;
};

// CSV with header metric,value,n,seed_lo,seed_hi; throws on non-finite values.
std::string to_csv(const MetricReport& report);

}  // namespace ddl
