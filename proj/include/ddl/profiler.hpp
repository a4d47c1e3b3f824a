#pragma once

#include <string>
#include <vector>

#include "ddl/diffusion.hpp"
#include "ddl/models.hpp"

namespace ddl {

// Mean absolute output of every tagged layer at every step of a sampling
// trajectory. Rows follow the trajectory from high noise down to the final
// jump; columns follow ScoreNet::tagged_layers().
struct ActivationMatrix {
    std::vector<int> time_index;               // schedule grid index per row, steps..1
    std::vector<double> sigma;                 // schedule_time(time_index, steps)
    std::vector<LayerTag> layers;              // column metadata
    std::vector<std::vector<double>> values;   // [row][column]
    std::vector<bool> constant;                // set by minmax_normalize, empty before
};

// Runs the Euler sampler for `steps` schedule points over a probe batch and
// records each tagged layer's mean |output| per step, averaged over the batch
// and all positions. The batch is split into `shards` equal slices processed
// in a fixed order and the shard matrices are averaged, so the shard count
// only reassociates the sums. Sampling itself is untouched by the hooks.
ActivationMatrix record_activations(const ScoreNet& net, int steps, int probe_batch, uint64_t seed,
                                    const ScheduleSpec& sch, const PreconditioningSpec& pc,
                                    int shards = 1);

// Rescales each layer column to [0,1] across time, so the step where a layer
// is quietest maps to exactly 0 and its loudest step to exactly 1. A column
// with no spread has nothing to rescale; it maps to all zeros, its `constant`
// flag is set, and a warning goes to stderr.
ActivationMatrix minmax_normalize(const ActivationMatrix& m);

// Writes one CSV row per matrix cell with the header
// time_index,sigma,layer_name,depth,side,value,constant
// in trajectory-then-column order.
void emit_profile(const ActivationMatrix& m, const std::string& path);

}  // namespace ddl
