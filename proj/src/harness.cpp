#include "ddl/harness.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "ddl/profiler.hpp"
#include "ddl/rng.hpp"

namespace ddl {

// ---------------------------------------------------------------- datasets

const char* dataset_name(DatasetKind k) {
    switch (k) {
        case DatasetKind::ring8: return "ring8";
        case DatasetKind::spiral2d: return "spiral2d";
        case DatasetKind::checkerboard2d: return "checkerboard2d";
        case DatasetKind::blobs1d: return "blobs1d";
    }
    throw std::runtime_error("dataset: bad kind");
}

DatasetKind dataset_from_name(const std::string& s) {
    if (s == "ring8") return DatasetKind::ring8;
    if (s == "spiral2d") return DatasetKind::spiral2d;
    if (s == "checkerboard2d") return DatasetKind::checkerboard2d;
    if (s == "blobs1d") return DatasetKind::blobs1d;
    throw std::runtime_error("dataset: unknown kind '" + s + "'");
}

Tensor ring8_centers() {
    std::vector<double> c(16);
    for (int m = 0; m < 8; ++m) {
        double ang = 2.0 * std::numbers::pi * m / 8.0;
        c[2 * m] = std::cos(ang);
        c[2 * m + 1] = std::sin(ang);
    }
    return Tensor::from_f64({8, 2}, std::move(c));
}

Dataset gen_dataset(DatasetKind kind, int n, uint64_t seed) {
    if (n < 1) throw std::runtime_error("dataset: n must be positive");
    Rng rng(seed);
    Dataset ds;
    ds.kind = kind;
    ds.seed = seed;
    switch (kind) {
        case DatasetKind::ring8: {
            std::vector<float> x(static_cast<size_t>(n) * 2);
            ds.labels.reserve(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) {
                int m = static_cast<int>(rng.range(8));
                double ang = 2.0 * std::numbers::pi * m / 8.0;
                x[2 * i] = static_cast<float>(std::cos(ang) + 0.05 * rng.normal());
                x[2 * i + 1] = static_cast<float>(std::sin(ang) + 0.05 * rng.normal());
                ds.labels.push_back(m);
            }
            ds.x = Tensor::from_f32({n, 2}, std::move(x));
            break;
        }
        case DatasetKind::spiral2d: {
            std::vector<float> x(static_cast<size_t>(n) * 2);
            for (int i = 0; i < n; ++i) {
                double u = rng.uniform();
                double ang = 4.0 * std::numbers::pi * u;
                double rad = 0.25 + 0.75 * u;
                x[2 * i] = static_cast<float>(rad * std::cos(ang) + 0.02 * rng.normal());
                x[2 * i + 1] = static_cast<float>(rad * std::sin(ang) + 0.02 * rng.normal());
            }
            ds.x = Tensor::from_f32({n, 2}, std::move(x));
            break;
        }
        case DatasetKind::checkerboard2d: {
            std::vector<float> x(static_cast<size_t>(n) * 2);
            for (int i = 0; i < n; ++i) {
                double x1 = rng.uniform() * 4.0 - 2.0;
                double shift = static_cast<double>(rng.range(2)) * 2.0;
                int parity = ((static_cast<int>(std::floor(x1)) % 2) + 2) % 2;
                double x2 = rng.uniform() - shift + parity;
                x[2 * i] = static_cast<float>(x1);
                x[2 * i + 1] = static_cast<float>(x2);
            }
            ds.x = Tensor::from_f32({n, 2}, std::move(x));
            break;
        }
        case DatasetKind::blobs1d: {
            const int len = 32;
            std::vector<float> x(static_cast<size_t>(n) * len);
            ds.labels.reserve(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) {
                int m = static_cast<int>(rng.range(4));
                double center = 4.0 + 8.0 * m;
                for (int j = 0; j < len; ++j) {
                    double d = (j - center) / 2.0;
                    x[static_cast<size_t>(i) * len + j] =
                        static_cast<float>(std::exp(-0.5 * d * d) + 0.05 * rng.normal());
                }
                ds.labels.push_back(m);
            }
            ds.x = Tensor::from_f32({n, 1, len}, std::move(x));
            break;
        }
    }
    return ds;
}

// ------------------------------------------------------------------ config

namespace {

// Every key with its default, in emission order. Sections are the prefix up
// to the first dot; the table is the single source of truth for what exists.
const std::vector<std::pair<std::string, std::string>>& config_registry() {
    static const std::vector<std::pair<std::string, std::string>> reg = {
        {"model.kind", "mlp2d"},
        {"model.width", "64"},
        {"model.depth", "2"},
        {"model.time_embed_dim", "64"},
        {"model.num_classes", "0"},
        {"schedule.sigma_min", "0.002"},
        {"schedule.sigma_max", "80"},
        {"schedule.rho", "7"},
        {"schedule.steps", "18"},
        {"schedule.sigma_data", "0.5"},
        {"schedule.epsilon", "0.002"},
        {"gan.gamma_r1", "1e-4"},
        {"gan.lr_g", "1e-4"},
        {"gan.lr_d", "1e-4"},
        {"gan.adam_beta1", "0"},
        {"gan.adam_beta2", "0.99"},
        {"gan.batch", "64"},
        {"gan.total_images", "16384"},
        {"gan.ema_halflife_images", "5000"},
        {"gan.ema_warmup_ratio", "0.05"},
        {"gan.disc_kind", "projected"},
        {"gan.disc_scales", "3"},
        {"gan.disc_feature_dim", "16"},
        {"gan.disc_head_width", "32"},
        {"distill.method", "gdd"},
        {"distill.cd_weight", "0"},
        {"distill.cd_solver", "heun"},
        {"distill.cd_schedule_steps", "18"},
        {"distill.freeze", ""},
        {"distill.k", "1"},
        {"distill.intermediate_sigma", ""},
        {"metrics.features", "raw"},
        {"metrics.feature_dim", "16"},
        {"metrics.eval_n", "2048"},
        {"metrics.coverage_radius", "0.15"},
        {"run.dataset", "ring8"},
        {"run.data_n", "8192"},
        {"run.out", "out"},
        {"run.root_seed", "0"},
        {"run.deterministic", "true"},
        {"run.pretrain_iters", "3000"},
        {"run.pretrain_batch", "128"},
        {"run.pretrain_lr", "2e-3"},
        {"run.sample_solver", "heun"},
        {"run.sample_steps", "32"},
        {"run.sample_batch", "1024"},
        {"run.sweep_steps", "2,4,8"},
        {"run.sweep_sigmas", "0.5,2,8,32"},
        {"run.profile_steps", "64"},
        {"run.profile_batch", "16"},
    };
    return reg;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string fmt9(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
    for (const auto& [k, v] : config_registry()) kv_[k] = v;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot read " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    ExperimentConfig cfg;
    cfg.apply_ini(ss.str());
    return cfg;
}

void ExperimentConfig::apply_ini(const std::string& text) {
    std::stringstream ss(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw std::runtime_error("config: bad section header at line " + std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: expected key = value at line " + std::to_string(lineno));
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (section.empty()) throw std::runtime_error("config: key '" + key + "' outside any section");
        set(section + "." + key, value);
    }
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw std::runtime_error("config: unknown key '" + key + "'");
    it->second = value;
}

const std::string& ExperimentConfig::get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw std::runtime_error("config: unknown key '" + key + "'");
    return it->second;
}

int ExperimentConfig::geti(const std::string& key) const {
    int64_t v = geti64(key);
    if (v < INT32_MIN || v > INT32_MAX) throw std::runtime_error("config: " + key + " out of range");
    return static_cast<int>(v);
}

int64_t ExperimentConfig::geti64(const std::string& key) const {
    const std::string& s = get(key);
    size_t pos = 0;
    int64_t v = 0;
    try {
        v = std::stoll(s, &pos);
    } catch (const std::exception&) {
        throw std::runtime_error("config: " + key + " is not an integer: '" + s + "'");
    }
    if (pos != s.size()) throw std::runtime_error("config: " + key + " is not an integer: '" + s + "'");
    return v;
}

uint64_t ExperimentConfig::getu64(const std::string& key) const {
    const std::string& s = get(key);
    size_t pos = 0;
    uint64_t v = 0;
    try {
        v = std::stoull(s, &pos);
    } catch (const std::exception&) {
        throw std::runtime_error("config: " + key + " is not an unsigned integer: '" + s + "'");
    }
    if (pos != s.size())
        throw std::runtime_error("config: " + key + " is not an unsigned integer: '" + s + "'");
    return v;
}

double ExperimentConfig::getd(const std::string& key) const {
    const std::string& s = get(key);
    size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw std::runtime_error("config: " + key + " is not a number: '" + s + "'");
    }
    if (pos != s.size()) throw std::runtime_error("config: " + key + " is not a number: '" + s + "'");
    return v;
}

bool ExperimentConfig::getb(const std::string& key) const {
    const std::string& s = get(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::runtime_error("config: " + key + " is not a boolean: '" + s + "'");
}

std::string ExperimentConfig::resolved() const {
    std::string out;
    std::string section;
    for (const auto& [key, def] : config_registry()) {
        (void)def;
        std::string sec = key.substr(0, key.find('.'));
        if (sec != section) {
            if (!out.empty()) out += "\n";
            out += "[" + sec + "]\n";
            section = sec;
        }
        out += key.substr(key.find('.') + 1) + " = " + kv_.at(key) + "\n";
    }
    return out;
}

ScoreNetSpec ExperimentConfig::model_spec() const {
    ScoreNetSpec s;
    std::string kind = get("model.kind");
    if (kind == "mlp2d") s.kind = ModelKind::mlp2d;
    else if (kind == "unet1d") s.kind = ModelKind::unet1d;
    else throw std::runtime_error("config: unknown model.kind '" + kind + "'");
    s.width = geti("model.width");
    s.depth = geti("model.depth");
    s.time_embed_dim = geti("model.time_embed_dim");
    s.num_classes = geti("model.num_classes");
    s.seed = seed_stream(getu64("run.root_seed"), "model.init");
    return s;
}

ScheduleSpec ExperimentConfig::schedule_spec() const {
    ScheduleSpec s;
    s.sigma_min = getd("schedule.sigma_min");
    s.sigma_max = getd("schedule.sigma_max");
    s.rho = getd("schedule.rho");
    s.steps = geti("schedule.steps");
    return s;
}

PreconditioningSpec ExperimentConfig::precond_spec() const {
    PreconditioningSpec p;
    p.sigma_data = getd("schedule.sigma_data");
    p.epsilon = getd("schedule.epsilon");
    return p;
}

GANConfig ExperimentConfig::gan_config() const {
    GANConfig g;
    g.gamma_r1 = getd("gan.gamma_r1");
    g.lr_g = getd("gan.lr_g");
    g.lr_d = getd("gan.lr_d");
    g.adam_beta1 = getd("gan.adam_beta1");
    g.adam_beta2 = getd("gan.adam_beta2");
    g.batch = geti("gan.batch");
    g.total_images = geti64("gan.total_images");
    g.ema_halflife_images = geti64("gan.ema_halflife_images");
    g.ema_warmup_ratio = getd("gan.ema_warmup_ratio");
    return g;
}

DiscriminatorSpec ExperimentConfig::disc_spec(int in_dim) const {
    DiscriminatorSpec d;
    d.kind = disc_kind_from_name(get("gan.disc_kind"));
    d.in_dim = in_dim;
    d.num_scales = geti("gan.disc_scales");
    d.feature_dim = geti("gan.disc_feature_dim");
    d.head_width = geti("gan.disc_head_width");
    uint64_t root = getu64("run.root_seed");
    d.feature_seed = seed_stream(root, "disc.features");
    d.seed = seed_stream(root, "disc.init");
    return d;
}

std::set<Category> ExperimentConfig::freeze_set() const {
    std::set<Category> out;
    for (const std::string& name : split_list(get("distill.freeze")))
        out.insert(category_from_name(name));
    return out;
}

DistillSpec ExperimentConfig::distill_spec() const {
    DistillSpec d;
    d.gan = gan_config();
    d.cd_weight = getd("distill.cd_weight");
    d.cd_solver = solver_from_name(get("distill.cd_solver"));
    d.cd_schedule_n = geti("distill.cd_schedule_steps");
    d.freeze = freeze_set();
    d.seed = seed_stream(getu64("run.root_seed"), "distill");
    d.deterministic = getb("run.deterministic");
    return d;
}

ScoreTrainConfig ExperimentConfig::pretrain_config() const {
    ScoreTrainConfig t;
    t.iters = geti("run.pretrain_iters");
    t.batch = geti("run.pretrain_batch");
    t.lr = getd("run.pretrain_lr");
    t.seed = seed_stream(getu64("run.root_seed"), "pretrain");
    return t;
}

FeatureMapSpec ExperimentConfig::feature_spec() const {
    FeatureMapSpec f;
    std::string kind = get("metrics.features");
    if (kind == "raw") f.kind = FeatureKind::raw;
    else if (kind == "frozen_random") f.kind = FeatureKind::frozen_random;
    else throw std::runtime_error("config: unknown metrics.features '" + kind + "'");
    f.out_dim = geti("metrics.feature_dim");
    f.seed = seed_stream(getu64("run.root_seed"), "metrics.features");
    return f;
}

// ------------------------------------------------------------- checkpoints

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as host bytes and assume little endian");

uint32_t crc32(const uint8_t* data, size_t len) {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

namespace {

constexpr char kMagic[4] = {'D', 'D', 'L', '1'};
constexpr uint32_t kVersion = 1;

void put_u16(std::vector<uint8_t>& b, uint16_t v) {
    b.push_back(static_cast<uint8_t>(v & 0xFF));
    b.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
}

// Bounds-checked cursor over the loaded bytes; running past the end means
// the length fields are inconsistent with the file size.
struct Reader {
    const std::vector<uint8_t>& b;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > b.size()) throw std::runtime_error("checkpoint: truncated tensor record");
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(b[pos] | (b[pos + 1] << 8));
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint8_t u8() {
        need(1);
        return b[pos++];
    }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(b.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_tensors(const std::vector<NamedTensor>& tensors, const std::string& path) {
    std::vector<uint8_t> buf;
    buf.insert(buf.end(), kMagic, kMagic + 4);
    put_u32(buf, kVersion);
    put_u32(buf, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (!t.defined()) throw std::runtime_error("checkpoint: undefined tensor '" + name + "'");
        if (name.size() > 0xFFFF) throw std::runtime_error("checkpoint: tensor name too long");
        put_u16(buf, static_cast<uint16_t>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        buf.push_back(t.dtype() == DType::f32 ? 0 : 1);
        if (t.rank() > 0xFF) throw std::runtime_error("checkpoint: tensor rank too large");
        buf.push_back(static_cast<uint8_t>(t.rank()));
        for (int64_t d : t.dims()) {
            if (d < 0 || d > 0xFFFFFFFFLL) throw std::runtime_error("checkpoint: dim out of range");
            put_u32(buf, static_cast<uint32_t>(d));
        }
        size_t bytes = static_cast<size_t>(t.numel()) * dtype_size(t.dtype());
        const uint8_t* src = t.dtype() == DType::f32
                                 ? reinterpret_cast<const uint8_t*>(t.data<float>().data())
                                 : reinterpret_cast<const uint8_t*>(t.data<double>().data());
        buf.insert(buf.end(), src, src + bytes);
    }
    put_u32(buf, crc32(buf.data(), buf.size()));

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    f.flush();
    if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
}

std::vector<NamedTensor> load_tensors(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot read " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    if (buf.size() < 12 || crc32(buf.data(), buf.size() - 4) !=
                               (static_cast<uint32_t>(buf[buf.size() - 4]) |
                                (static_cast<uint32_t>(buf[buf.size() - 3]) << 8) |
                                (static_cast<uint32_t>(buf[buf.size() - 2]) << 16) |
                                (static_cast<uint32_t>(buf[buf.size() - 1]) << 24)))
        throw std::runtime_error("checkpoint: crc mismatch in " + path);

    Reader r{buf};
    r.pos = 4;
    uint32_t version = r.u32();
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    uint32_t count = r.u32();
    std::vector<NamedTensor> out;
    out.reserve(count);
    const size_t body_end = buf.size() - 4;
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str(r.u16());
        uint8_t dtype = r.u8();
        if (dtype > 1) throw std::runtime_error("checkpoint: bad dtype for '" + name + "'");
        uint8_t rank = r.u8();
        std::vector<int64_t> dims(rank);
        int64_t numel = 1;
        for (auto& d : dims) {
            d = r.u32();
            numel *= d;
        }
        size_t bytes = static_cast<size_t>(numel) * (dtype == 0 ? 4 : 8);
        r.need(bytes);
        Tensor t;
        if (dtype == 0) {
            std::vector<float> v(static_cast<size_t>(numel));
            std::memcpy(v.data(), buf.data() + r.pos, bytes);
            t = Tensor::from_f32(std::move(dims), std::move(v));
        } else {
            std::vector<double> v(static_cast<size_t>(numel));
            std::memcpy(v.data(), buf.data() + r.pos, bytes);
            t = Tensor::from_f64(std::move(dims), std::move(v));
        }
        r.pos += bytes;
        out.push_back({std::move(name), std::move(t)});
    }
    if (r.pos != body_end) throw std::runtime_error("checkpoint: trailing bytes after tensors");
    return out;
}

namespace {

Tensor meta_vec(std::initializer_list<double> vals) {
    return Tensor::from_f64({static_cast<int64_t>(vals.size())}, std::vector<double>(vals));
}

std::pair<double, double> split_u64(uint64_t v) {
    return {static_cast<double>(v & 0xFFFFFFFFULL), static_cast<double>(v >> 32)};
}

uint64_t join_u64(double lo, double hi) {
    return static_cast<uint64_t>(lo) | (static_cast<uint64_t>(hi) << 32);
}

const Tensor& find_tensor(const std::vector<NamedTensor>& ts, const std::string& name) {
    for (const auto& nt : ts)
        if (nt.name == name) return nt.value;
    throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
}

}  // namespace

void save_checkpoint(const ScoreNet& net, const std::string& path) {
    const ScoreNetSpec& s = net.spec();
    auto [seed_lo, seed_hi] = split_u64(s.seed);
    std::vector<NamedTensor> ts;
    ts.push_back({"meta.model",
                  meta_vec({s.kind == ModelKind::mlp2d ? 0.0 : 1.0, static_cast<double>(s.width),
                            static_cast<double>(s.depth), static_cast<double>(s.time_embed_dim),
                            static_cast<double>(s.num_classes), seed_lo, seed_hi,
                            net.dtype() == DType::f32 ? 0.0 : 1.0})});
    const ParamStore& ps = net.params();
    std::vector<double> frozen(ps.size());
    for (size_t i = 0; i < ps.size(); ++i) {
        frozen[i] = ps.at(i).frozen ? 1.0 : 0.0;
        ts.push_back({"param." + ps.at(i).name, ps.at(i).value});
    }
    ts.push_back({"meta.frozen", Tensor::from_f64({static_cast<int64_t>(frozen.size())}, frozen)});
    save_tensors(ts, path);
}

ScoreNet load_score_checkpoint(const std::string& path) {
    std::vector<NamedTensor> ts = load_tensors(path);
    const Tensor& meta = find_tensor(ts, "meta.model");
    if (meta.numel() != 8) throw std::runtime_error("checkpoint: bad model metadata in " + path);
    ScoreNetSpec spec;
    spec.kind = meta.at(0) == 0.0 ? ModelKind::mlp2d : ModelKind::unet1d;
    spec.width = static_cast<int>(meta.at(1));
    spec.depth = static_cast<int>(meta.at(2));
    spec.time_embed_dim = static_cast<int>(meta.at(3));
    spec.num_classes = static_cast<int>(meta.at(4));
    spec.seed = join_u64(meta.at(5), meta.at(6));
    DType dt = meta.at(7) == 0.0 ? DType::f32 : DType::f64;

    ScoreNet net(spec, dt);
    std::map<std::string, Tensor> state;
    for (const auto& nt : ts)
        if (nt.name.rfind("param.", 0) == 0) state[nt.name.substr(6)] = nt.value;
    net.params().load_state(state);
    const Tensor& frozen = find_tensor(ts, "meta.frozen");
    if (frozen.numel() != static_cast<int64_t>(net.params().size()))
        throw std::runtime_error("checkpoint: frozen markers do not match the parameter count");
    for (size_t i = 0; i < net.params().size(); ++i)
        net.params().at(i).frozen = frozen.at(static_cast<int64_t>(i)) != 0.0;
    return net;
}

void save_checkpoint(const SampleSet& set, const std::string& path) {
    auto [lo0, lo1] = split_u64(set.seed_lo);
    auto [hi0, hi1] = split_u64(set.seed_hi);
    std::vector<NamedTensor> ts;
    ts.push_back({"meta.samples", meta_vec({lo0, lo1, hi0, hi1, static_cast<double>(set.nfe)})});
    ts.push_back({"samples", set.samples});
    save_tensors(ts, path);
}

SampleSet load_samples_checkpoint(const std::string& path) {
    std::vector<NamedTensor> ts = load_tensors(path);
    const Tensor& meta = find_tensor(ts, "meta.samples");
    if (meta.numel() != 5) throw std::runtime_error("checkpoint: bad sample metadata in " + path);
    SampleSet s;
    s.samples = find_tensor(ts, "samples");
    s.seed_lo = join_u64(meta.at(0), meta.at(1));
    s.seed_hi = join_u64(meta.at(2), meta.at(3));
    s.nfe = static_cast<int64_t>(meta.at(4));
    return s;
}

// --------------------------------------------------------------- pipelines

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("pipeline: cannot write " + path);
    f << text;
    f.flush();
    if (!f) throw std::runtime_error("pipeline: cannot write " + path);
}

std::string join_path(const std::string& dir, const std::string& name) { return dir + "/" + name; }

// Shared context assembled once per stage invocation.
struct Stage {
    const ExperimentConfig& cfg;
    std::string out;
    uint64_t root;
    ScheduleSpec sch;
    PreconditioningSpec pc;
    std::vector<std::string> artifacts;

    explicit Stage(const ExperimentConfig& c)
        : cfg(c),
          out(c.get("run.out")),
          root(c.getu64("run.root_seed")),
          sch(c.schedule_spec()),
          pc(c.precond_spec()) {
        std::filesystem::create_directories(out);
        write(join_path(out, "resolved.ini"), cfg.resolved());
    }

    void write(const std::string& path, const std::string& text) {
        write_text(path, text);
        artifacts.push_back(path);
    }

    Dataset train_data() const {
        return gen_dataset(dataset_from_name(cfg.get("run.dataset")), cfg.geti("run.data_n"),
                           seed_stream(root, "data"));
    }

    Dataset eval_data() const {
        return gen_dataset(dataset_from_name(cfg.get("run.dataset")), cfg.geti("metrics.eval_n"),
                           seed_stream(root, "eval.data"));
    }

    ScoreNet load_score(const std::string& stage) const {
        std::string p = join_path(out, "score.ddl1");
        if (!std::filesystem::exists(p))
            throw std::runtime_error(stage + ": missing score checkpoint '" + p +
                                     "'; run train-score first");
        return load_score_checkpoint(p);
    }

    ScoreNet load_generator(const std::string& stage) const {
        std::string p = join_path(out, "generator.ddl1");
        if (!std::filesystem::exists(p))
            throw std::runtime_error(stage + ": missing generator checkpoint '" + p +
                                     "'; run distill first");
        return load_score_checkpoint(p);
    }

    // Fraction of samples within the coverage radius of the weakest ring8
    // mode; skipped for the other datasets.
    void coverage_rows(MetricReport& rep, const Tensor& samples) const {
        if (dataset_from_name(cfg.get("run.dataset")) != DatasetKind::ring8) return;
        ModeCoverage mc =
            mode_coverage(samples, ring8_centers(), cfg.getd("metrics.coverage_radius"));
        double mn = 1.0;
        for (size_t m = 0; m < mc.fraction.size(); ++m) {
            rep.values.push_back({"coverage.mode" + std::to_string(m), mc.fraction[m]});
            mn = std::min(mn, mc.fraction[m]);
        }
        rep.values.push_back({"coverage.min", mn});
        rep.values.push_back({"coverage.background", mc.background});
    }
};

std::string distill_log_csv(const std::vector<TrainLogRow>& log) {
    std::string csv = "step,images_seen,d_loss,g_loss,r1,wall_ms\n";
    for (const auto& r : log)
        csv += std::to_string(r.step) + "," + std::to_string(r.images_seen) + "," + fmt9(r.d_loss) +
               "," + fmt9(r.g_loss) + "," + fmt9(r.r1) + "," + fmt9(r.wall_ms) + "\n";
    return csv;
}

// Resolves the configured distillation run: method dispatch plus the gdd-i
// alias, which is plain gdd with the conv category frozen.
DistillResult run_configured_distill(const Stage& st, const ScoreNet& score, const Tensor& data) {
    const ExperimentConfig& cfg = st.cfg;
    DistillSpec dspec = cfg.distill_spec();
    DiscriminatorSpec disc = cfg.disc_spec(score.data_dim());
    std::string method = cfg.get("distill.method");
    if (method == "gdd") return distill_gdd(score, disc, data, dspec, st.sch, st.pc);
    if (method == "gdd-i") {
        dspec.freeze.insert(Category::conv);
        return distill_gdd(score, disc, data, dspec, st.sch, st.pc);
    }
    if (method == "combined") return distill_combined(score, disc, data, dspec, st.sch, st.pc);
    if (method == "kstep") {
        TeacherSpec teacher;
        teacher.k = cfg.geti("distill.k");
        if (!cfg.get("distill.intermediate_sigma").empty())
            teacher.intermediate_sigma_override = cfg.getd("distill.intermediate_sigma");
        return train_kstep_teacher(score, disc, data, dspec, teacher, st.sch, st.pc);
    }
    throw std::runtime_error("config: unknown distill.method '" + method + "'");
}

int configured_k(const ExperimentConfig& cfg) {
    return cfg.get("distill.method") == "kstep" ? cfg.geti("distill.k") : 1;
}

std::optional<double> configured_mid(const ExperimentConfig& cfg) {
    if (cfg.get("distill.method") != "kstep" || cfg.get("distill.intermediate_sigma").empty())
        return std::nullopt;
    return cfg.getd("distill.intermediate_sigma");
}

void stage_train_score(Stage& st) {
    Dataset ds = st.train_data();
    ScoreNet net(st.cfg.model_spec());
    const std::vector<int>* labels = nullptr;
    if (net.spec().num_classes > 0) {
        if (ds.labels.empty())
            throw std::runtime_error("train-score: dataset '" + st.cfg.get("run.dataset") +
                                     "' has no class labels");
        labels = &ds.labels;
    }
    std::vector<double> trace =
        train_score(net, ds.x, labels, st.cfg.pretrain_config(), st.sch, st.pc);
    save_checkpoint(net, join_path(st.out, "score.ddl1"));
    st.artifacts.push_back(join_path(st.out, "score.ddl1"));

    std::string csv = "iter,loss\n";
    for (size_t i = 0; i < trace.size(); ++i)
        csv += std::to_string(i) + "," + fmt9(trace[i]) + "\n";
    st.write(join_path(st.out, "score_loss.csv"), csv);

    // Closing eval: the pre-trained sampler against held-out data.
    Dataset held = st.eval_data();
    SamplerSpec sp{solver_from_name(st.cfg.get("run.sample_solver")), st.cfg.geti("run.sample_steps"),
                   seed_stream(st.root, "eval.noise")};
    SampleSet set = sample(net, sp, st.sch, st.pc, st.cfg.geti("metrics.eval_n"));
    FeatureMap fm(st.cfg.feature_spec(), net.data_dim());
    MetricReport rep;
    rep.n = set.samples.dim(0);
    rep.seed_lo = set.seed_lo;
    rep.seed_hi = set.seed_hi;
    rep.values.push_back({"frechet.teacher_data", frechet_distance(set.samples, held.x, fm)});
    rep.values.push_back({"mmd2.teacher_data", mmd2_unbiased(set.samples, held.x)});
    st.coverage_rows(rep, set.samples);
    st.write(join_path(st.out, "score_report.csv"), to_csv(rep));
}

void stage_distill(Stage& st) {
    ScoreNet score = st.load_score("distill");
    Dataset ds = st.train_data();
    DistillResult res = run_configured_distill(st, score, ds.x);
    save_checkpoint(res.generator, join_path(st.out, "generator.ddl1"));
    st.artifacts.push_back(join_path(st.out, "generator.ddl1"));
    st.write(join_path(st.out, "distill_log.csv"), distill_log_csv(res.log));

    Dataset held = st.eval_data();
    SampleSet set = sample_kstep(res.generator, configured_k(st.cfg), configured_mid(st.cfg),
                                 st.cfg.geti("metrics.eval_n"), seed_stream(st.root, "eval.noise"),
                                 st.sch, st.pc);
    FeatureMap fm(st.cfg.feature_spec(), res.generator.data_dim());
    MetricReport rep;
    rep.n = set.samples.dim(0);
    rep.seed_lo = set.seed_lo;
    rep.seed_hi = set.seed_hi;
    rep.values.push_back({"frechet.generator_data", frechet_distance(set.samples, held.x, fm)});
    rep.values.push_back({"mmd2.generator_data", mmd2_unbiased(set.samples, held.x)});
    st.coverage_rows(rep, set.samples);
    st.write(join_path(st.out, "distill_report.csv"), to_csv(rep));
}

void stage_sample(Stage& st) {
    ScoreNet gen = st.load_generator("sample");
    SampleSet set = sample_kstep(gen, configured_k(st.cfg), configured_mid(st.cfg),
                                 st.cfg.geti("run.sample_batch"),
                                 seed_stream(st.root, "sample.noise"), st.sch, st.pc);
    save_checkpoint(set, join_path(st.out, "samples.ddl1"));
    st.artifacts.push_back(join_path(st.out, "samples.ddl1"));

    int64_t n = set.samples.dim(0);
    int64_t d = set.samples.numel() / n;
    std::string csv;
    for (int64_t c = 0; c < d; ++c) csv += (c ? ",c" : "c") + std::to_string(c);
    csv += "\n";
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t c = 0; c < d; ++c) csv += (c ? "," : "") + fmt9(set.samples.at(i * d + c));
        csv += "\n";
    }
    st.write(join_path(st.out, "samples.csv"), csv);
}

void stage_eval(Stage& st) {
    ScoreNet score = st.load_score("eval");
    ScoreNet gen = st.load_generator("eval");
    Dataset held = st.eval_data();
    int n = st.cfg.geti("metrics.eval_n");
    uint64_t noise_seed = seed_stream(st.root, "eval.noise");

    SampleSet student =
        sample_kstep(gen, configured_k(st.cfg), configured_mid(st.cfg), n, noise_seed, st.sch, st.pc);
    SamplerSpec sp{solver_from_name(st.cfg.get("run.sample_solver")), st.cfg.geti("run.sample_steps"),
                   noise_seed};
    SampleSet teacher = sample(score, sp, st.sch, st.pc, n);

    FeatureMap fm(st.cfg.feature_spec(), gen.data_dim());
    double f_student = frechet_distance(student.samples, held.x, fm);
    double f_teacher = frechet_distance(teacher.samples, held.x, fm);
    MetricReport rep;
    rep.n = n;
    rep.seed_lo = student.seed_lo;
    rep.seed_hi = student.seed_hi;
    rep.values.push_back({"frechet.generator_data", f_student});
    rep.values.push_back({"frechet.teacher_data", f_teacher});
    rep.values.push_back({"frechet.ratio", f_teacher > 0 ? f_student / f_teacher : 0.0});
    rep.values.push_back({"mmd2.generator_data", mmd2_unbiased(student.samples, held.x)});
    rep.values.push_back({"nfe.generator", static_cast<double>(student.nfe)});
    rep.values.push_back({"nfe.teacher", static_cast<double>(teacher.nfe)});
    st.coverage_rows(rep, student.samples);
    st.write(join_path(st.out, "report.csv"), to_csv(rep));
}

void stage_relfid_sweep(Stage& st) {
    ScoreNet score = st.load_score("relfid-sweep");
    Dataset ds = st.train_data();
    Dataset held = st.eval_data();
    int n = st.cfg.geti("metrics.eval_n");
    uint64_t noise_seed = seed_stream(st.root, "eval.noise");
    DiscriminatorSpec disc = st.cfg.disc_spec(score.data_dim());

    DistillSpec base = st.cfg.distill_spec();
    DistillResult student = distill_gdd(score, disc, ds.x, base, st.sch, st.pc);
    SampleSet student_set =
        sample_kstep(student.generator, 1, std::nullopt, n, noise_seed, st.sch, st.pc);

    std::vector<std::pair<int, SampleSet>> teachers;
    for (const std::string& tok : split_list(st.cfg.get("run.sweep_steps"))) {
        int k = std::stoi(tok);
        DistillSpec dspec = st.cfg.distill_spec();
        dspec.seed = seed_stream(st.root, "teacher.k" + std::to_string(k));
        DistillResult teacher =
            train_kstep_teacher(score, disc, ds.x, dspec, TeacherSpec{k, std::nullopt}, st.sch, st.pc);
        teachers.push_back(
            {k, sample_kstep(teacher.generator, k, std::nullopt, n, noise_seed, st.sch, st.pc)});
    }

    FeatureMap fm(st.cfg.feature_spec(), score.data_dim());
    std::vector<RelAbsRow> rows = rel_abs_sweep(student_set, teachers, held.x, fm);
    std::string csv = "k,abs_metric,rel_metric\n";
    for (const auto& r : rows)
        csv += std::to_string(r.k) + "," + fmt9(r.abs_metric) + "," + fmt9(r.rel_metric) + "\n";
    st.write(join_path(st.out, "relfid.csv"), csv);
}

void stage_sigma_sweep(Stage& st) {
    ScoreNet score = st.load_score("sigma-sweep");
    Dataset ds = st.train_data();
    Dataset held = st.eval_data();
    int n = st.cfg.geti("metrics.eval_n");
    uint64_t noise_seed = seed_stream(st.root, "eval.noise");
    DiscriminatorSpec disc = st.cfg.disc_spec(score.data_dim());

    DistillSpec base = st.cfg.distill_spec();
    DistillResult student = distill_gdd(score, disc, ds.x, base, st.sch, st.pc);
    SampleSet student_set =
        sample_kstep(student.generator, 1, std::nullopt, n, noise_seed, st.sch, st.pc);

    FeatureMap fm(st.cfg.feature_spec(), score.data_dim());
    std::string csv = "sigma,abs_metric,rel_metric\n";
    for (const std::string& tok : split_list(st.cfg.get("run.sweep_sigmas"))) {
        double sigma = std::stod(tok);
        DistillSpec dspec = st.cfg.distill_spec();
        dspec.seed = seed_stream(st.root, "teacher.sigma" + tok);
        DistillResult teacher =
            train_kstep_teacher(score, disc, ds.x, dspec, TeacherSpec{2, sigma}, st.sch, st.pc);
        SampleSet set = sample_kstep(teacher.generator, 2, sigma, n, noise_seed, st.sch, st.pc);
        csv += fmt9(sigma) + "," + fmt9(frechet_distance(set.samples, held.x, fm)) + "," +
               fmt9(frechet_distance(student_set.samples, set.samples, fm)) + "\n";
    }
    st.write(join_path(st.out, "sigma_sweep.csv"), csv);
}

void stage_freeze_ablation(Stage& st) {
    ScoreNet score = st.load_score("freeze-ablation");
    Dataset ds = st.train_data();
    Dataset held = st.eval_data();
    int n = st.cfg.geti("metrics.eval_n");
    uint64_t noise_seed = seed_stream(st.root, "eval.noise");
    DiscriminatorSpec disc = st.cfg.disc_spec(score.data_dim());
    std::vector<CensusRow> shares = param_census(score.params());

    // The ablation ladder: tune everything, then freeze conv, then conv+qkv,
    // then conv+qkv+skip. Same seed on every row so runs are paired.
    const std::vector<std::set<Category>> masks = {
        {},
        {Category::conv},
        {Category::conv, Category::qkv},
        {Category::conv, Category::qkv, Category::skip},
    };
    std::string csv = "mask,frozen_share,frechet,coverage_min,background\n";
    FeatureMap fm(st.cfg.feature_spec(), score.data_dim());
    bool ring = dataset_from_name(st.cfg.get("run.dataset")) == DatasetKind::ring8;
    for (const auto& mask : masks) {
        DistillSpec dspec = st.cfg.distill_spec();
        dspec.freeze = mask;
        DistillResult res = distill_gdd(score, disc, ds.x, dspec, st.sch, st.pc);
        SampleSet set = sample_kstep(res.generator, 1, std::nullopt, n, noise_seed, st.sch, st.pc);

        std::string label;
        double share = 0.0;
        for (Category c : mask) {
            label += label.empty() ? "" : "+";
            label += category_name(c);
            for (const auto& row : shares)
                if (row.cat == c) share += row.fraction;
        }
        if (label.empty()) label = "none";
        double cov_min = 0.0, background = 0.0;
        if (ring) {
            ModeCoverage mc =
                mode_coverage(set.samples, ring8_centers(), st.cfg.getd("metrics.coverage_radius"));
            cov_min = *std::min_element(mc.fraction.begin(), mc.fraction.end());
            background = mc.background;
        }
        csv += label + "," + fmt9(share) + "," + fmt9(frechet_distance(set.samples, held.x, fm)) +
               "," + fmt9(cov_min) + "," + fmt9(background) + "\n";
    }
    st.write(join_path(st.out, "freeze_ablation.csv"), csv);
}

void stage_profile(Stage& st) {
    ScoreNet score = st.load_score("profile");
    ActivationMatrix m =
        record_activations(score, st.cfg.geti("run.profile_steps"), st.cfg.geti("run.profile_batch"),
                           seed_stream(st.root, "profile"), st.sch, st.pc);
    emit_profile(minmax_normalize(m), join_path(st.out, "profile.csv"));
    st.artifacts.push_back(join_path(st.out, "profile.csv"));
}

void stage_census(Stage& st) {
    ScoreNet net(st.cfg.model_spec());
    std::string csv = "category,params,share\n";
    for (const CensusRow& r : param_census(net.params()))
        csv += std::string(category_name(r.cat)) + "," + std::to_string(r.count) + "," +
               fmt9(r.fraction) + "\n";
    st.write(join_path(st.out, "census.csv"), csv);
}

}  // namespace

PipelineResult run_pipeline(const std::string& name, const ExperimentConfig& cfg) {
    Stage st(cfg);
    if (name == "train-score") stage_train_score(st);
    else if (name == "distill") stage_distill(st);
    else if (name == "sample") stage_sample(st);
    else if (name == "eval") stage_eval(st);
    else if (name == "relfid-sweep") stage_relfid_sweep(st);
    else if (name == "sigma-sweep") stage_sigma_sweep(st);
    else if (name == "freeze-ablation") stage_freeze_ablation(st);
    else if (name == "profile") stage_profile(st);
    else if (name == "census") stage_census(st);
    else throw std::runtime_error("pipeline: unknown stage '" + name + "'");
    return {std::move(st.artifacts)};
}

}  // namespace ddl
