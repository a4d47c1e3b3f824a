#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ddl/distill.hpp"
#include "ddl/metrics.hpp"
#include "ddl/models.hpp"

namespace ddl {

// ---------------------------------------------------------------- datasets

enum class DatasetKind { ring8, spiral2d, checkerboard2d, blobs1d };

const char* dataset_name(DatasetKind k);
DatasetKind dataset_from_name(const std::string& s);

// Synthetic stand-ins for image datasets, bitwise reproducible from
// (kind, n, seed). ring8 and blobs1d carry a class id per sample.
struct Dataset {
    DatasetKind kind = DatasetKind::ring8;
    Tensor x;                  // [n,2] f32, or [n,1,32] for blobs1d
    std::vector<int> labels;   // empty for the unconditional kinds
    uint64_t seed = 0;
};

Dataset gen_dataset(DatasetKind kind, int n, uint64_t seed);

// The 8 blob centers on the unit circle, [8,2] f64, for coverage metrics.
Tensor ring8_centers();

// ------------------------------------------------------------------ config

// Flat dotted-key configuration over fixed sections. Every key has an
// explicit default; unknown keys are rejected at parse and set time, and
// resolved() prints the full key set so a run can be replayed from its
// emitted config alone.
class ExperimentConfig {
  public:
    ExperimentConfig();  // all defaults

    static ExperimentConfig from_file(const std::string& path);
    void apply_ini(const std::string& text);      // parse file contents
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    int geti(const std::string& key) const;
    int64_t geti64(const std::string& key) const;
    uint64_t getu64(const std::string& key) const;
    double getd(const std::string& key) const;
    bool getb(const std::string& key) const;

    std::string resolved() const;  // INI text, every key in section order

    // Typed views assembled from the relevant sections.
    ScoreNetSpec model_spec() const;
    ScheduleSpec schedule_spec() const;
    PreconditioningSpec precond_spec() const;
    GANConfig gan_config() const;
    DiscriminatorSpec disc_spec(int in_dim) const;
    DistillSpec distill_spec() const;
    ScoreTrainConfig pretrain_config() const;
    FeatureMapSpec feature_spec() const;
    std::set<Category> freeze_set() const;

  private:
    std::map<std::string, std::string> kv_;
};

// ------------------------------------------------------------- checkpoints

// CRC-32 (reflected 0xEDB88320, the zlib convention) over a byte range.
uint32_t crc32(const uint8_t* data, size_t len);

struct NamedTensor {
    std::string name;
    Tensor value;
};

// Binary tensor archive: "DDL1", version, count, per-tensor name/dtype/dims/
// payload, trailing CRC-32 of everything before it. Load verifies magic,
// CRC, and version in that order and reports each failure distinctly.
void save_tensors(const std::vector<NamedTensor>& tensors, const std::string& path);
std::vector<NamedTensor> load_tensors(const std::string& path);

// Model and sample-set adapters over the archive. The model file carries its
// spec and freeze markers alongside the weights so loading rebuilds the net
// exactly; the sample file keeps the seed range and NFE provenance.
void save_checkpoint(const ScoreNet& net, const std::string& path);
ScoreNet load_score_checkpoint(const std::string& path);
void save_checkpoint(const SampleSet& set, const std::string& path);
SampleSet load_samples_checkpoint(const std::string& path);

// --------------------------------------------------------------- pipelines

struct PipelineResult {
    std::vector<std::string> artifacts;  // files written, in order
};

// Runs one named stage against the out directory in the config. Stages read
// their prerequisites from that directory and fail by naming the stage that
// should have produced them. All randomness fans out from run.root_seed.
PipelineResult run_pipeline(const std::string& name, const ExperimentConfig& cfg);

}  // namespace ddl
