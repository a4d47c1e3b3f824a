#include "ddl/profiler.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <stdexcept>

namespace ddl {

namespace {

// Turns per-forward layer outputs into one matrix row per sampling step.
// Layers fire in tag order inside each forward pass, but the recorder keys
// rows off a per-layer fire count instead, so it also survives solvers that
// evaluate some step twice only if every layer does (anything else is caught
// by the row audit after sampling).
struct MeanAbsRecorder final : ActivationRecorder {
    explicit MeanAbsRecorder(size_t n_layers) : fired(n_layers, 0), n(n_layers) {}

    void on_layer(size_t layer_index, const Tensor& value) override {
        if (layer_index >= n) throw std::runtime_error("profiler: layer index out of range");
        size_t row = fired[layer_index]++;
        if (row == rows.size()) rows.emplace_back(n, 0.0);
        double acc = 0.0;
        for (int64_t i = 0; i < value.numel(); ++i) acc += std::fabs(value.at(i));
        rows[row][layer_index] = acc / static_cast<double>(value.numel());
    }

    std::vector<std::vector<double>> rows;
    std::vector<size_t> fired;
    size_t n = 0;
};

}  // namespace

ActivationMatrix record_activations(const ScoreNet& net, int steps, int probe_batch, uint64_t seed,
                                    const ScheduleSpec& sch, const PreconditioningSpec& pc,
                                    int shards) {
    const auto& layers = net.tagged_layers();
    if (layers.empty()) throw std::runtime_error("profiler: model has no tagged layers");
    if (steps < 1) throw std::runtime_error("profiler: steps must be positive");
    if (probe_batch < 1) throw std::runtime_error("profiler: probe batch is empty");
    if (shards < 1 || probe_batch % shards != 0)
        throw std::runtime_error("profiler: shards must divide the probe batch");

    const size_t n_layers = layers.size();
    const int shard_batch = probe_batch / shards;
    std::vector<std::vector<double>> sum(static_cast<size_t>(steps),
                                         std::vector<double>(n_layers, 0.0));
    for (int s = 0; s < shards; ++s) {
        MeanAbsRecorder rec(n_layers);
        // Shard s owns trajectory seeds [seed + s·shard_batch, ...), the same
        // per-sample streams the unsharded run would use.
        SamplerSpec sp{Solver::euler, steps, seed + static_cast<uint64_t>(s) * shard_batch};
        sample(net, sp, sch, pc, shard_batch, nullptr, &rec);
        if (rec.rows.size() != static_cast<size_t>(steps))
            throw std::runtime_error("profiler: recorded rows do not match the schedule");
        for (size_t l = 0; l < n_layers; ++l)
            if (rec.fired[l] != static_cast<size_t>(steps))
                throw std::runtime_error("profiler: layer fired unevenly across steps");
        for (size_t r = 0; r < rec.rows.size(); ++r)
            for (size_t l = 0; l < n_layers; ++l) sum[r][l] += rec.rows[r][l];
    }

    ActivationMatrix m;
    m.layers = layers;
    m.values = std::move(sum);
    for (auto& row : m.values)
        for (double& v : row) v /= static_cast<double>(shards);
    // The Euler sampler evaluates at grid indices steps, steps-1, ..., 1.
    for (int i = steps; i >= 1; --i) {
        m.time_index.push_back(i);
        m.sigma.push_back(schedule_time(i, steps, sch));
    }
    return m;
}

ActivationMatrix minmax_normalize(const ActivationMatrix& m) {
    const size_t rows = m.values.size();
    if (rows == 0 || m.layers.empty()) throw std::runtime_error("profiler: empty activation matrix");
    for (const auto& row : m.values) {
        if (row.size() != m.layers.size())
            throw std::runtime_error("profiler: ragged activation matrix");
        for (double v : row)
            if (!std::isfinite(v)) throw std::runtime_error("profiler: non-finite activation");
    }

    ActivationMatrix out;
    out.time_index = m.time_index;
    out.sigma = m.sigma;
    out.layers = m.layers;
    out.values.assign(rows, std::vector<double>(m.layers.size(), 0.0));
    out.constant.assign(m.layers.size(), false);
    for (size_t l = 0; l < m.layers.size(); ++l) {
        double mn = m.values[0][l], mx = m.values[0][l];
        for (size_t r = 1; r < rows; ++r) {
            mn = std::min(mn, m.values[r][l]);
            mx = std::max(mx, m.values[r][l]);
        }
        if (mx == mn) {
            // No spread to rescale; zeros are honest and the flag marks it.
            out.constant[l] = true;
            std::cerr << "profiler: layer '" << m.layers[l].name
                      << "' is constant across time, normalized to zeros\n";
            continue;
        }
        for (size_t r = 0; r < rows; ++r) out.values[r][l] = (m.values[r][l] - mn) / (mx - mn);
    }
    return out;
}

void emit_profile(const ActivationMatrix& m, const std::string& path) {
    if (m.values.size() != m.time_index.size() || m.sigma.size() != m.time_index.size())
        throw std::runtime_error("profiler: matrix rows and time axis disagree");
    for (const auto& row : m.values)
        if (row.size() != m.layers.size())
            throw std::runtime_error("profiler: ragged activation matrix");

    std::ofstream f(path);
    if (!f) throw std::runtime_error("profiler: cannot write " + path);
    f << "time_index,sigma,layer_name,depth,side,value,constant\n";
    char buf[128];
    for (size_t r = 0; r < m.values.size(); ++r) {
        for (size_t l = 0; l < m.layers.size(); ++l) {
            int flag = (l < m.constant.size() && m.constant[l]) ? 1 : 0;
            std::snprintf(buf, sizeof(buf), "%d,%.9g,", m.time_index[r], m.sigma[r]);
            f << buf << m.layers[l].name << ',' << m.layers[l].depth << ',' << m.layers[l].side
              << ',';
            std::snprintf(buf, sizeof(buf), "%.9g,%d\n", m.values[r][l], flag);
            f << buf;
        }
    }
    f.flush();
    if (!f) throw std::runtime_error("profiler: cannot write " + path);
}

}  // namespace ddl
