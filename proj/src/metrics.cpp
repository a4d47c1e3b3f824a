#include "ddl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "ddl/nn.hpp"
#include "ddl/rng.hpp"
#include "ddl/tape.hpp"

namespace ddl {

namespace {

// flatten [n, ...] to row-major doubles, n rows of d columns
std::vector<double> rows_of(const Tensor& x, int64_t& n, int64_t& d) {
    if (x.dims().size() < 2) throw std::runtime_error("metrics: sample sets must be [n, ...]");
    n = x.dims()[0];
    d = x.numel() / n;
    std::vector<double> out(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i) out[static_cast<size_t>(i)] = x.at(i);
    return out;
}

struct KahanSum {
    double s = 0.0, c = 0.0;
    void add(double v) {
        double y = v - c;
        double t = s + y;
        c = (t - s) - y;
        s = t;
    }
};

double sq_dist(const double* a, const double* b, int64_t d) {
    double acc = 0.0;
    for (int64_t k = 0; k < d; ++k) {
        double diff = a[k] - b[k];
        acc += diff * diff;
    }
    return acc;
}

// cyclic Jacobi rotations on a symmetric matrix; eigenvalues land on the
// diagonal of a and eigenvectors in the columns of v
void jacobi_eigensym(std::vector<double>& a, int n, std::vector<double>& v) {
    v.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;
    auto at = [&](std::vector<double>& m, int r, int c) -> double& {
        return m[static_cast<size_t>(r) * n + c];
    };
    double scale = 0.0;
    for (int i = 0; i < n; ++i) scale = std::max(scale, std::abs(at(a, i, i)));
    scale = std::max(scale, 1e-300);

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += at(a, p, q) * at(a, p, q);
        if (off < 1e-28 * scale * scale) return;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double apq = at(a, p, q);
                if (std::abs(apq) < 1e-60) continue;
                double theta = (at(a, q, q) - at(a, p, p)) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int k = 0; k < n; ++k) {
                    double akp = at(a, k, p), akq = at(a, k, q);
                    at(a, k, p) = c * akp - s * akq;
                    at(a, k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = at(a, p, k), aqk = at(a, q, k);
                    at(a, p, k) = c * apk - s * aqk;
                    at(a, q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = at(v, k, p), vkq = at(v, k, q);
                    at(v, k, p) = c * vkp - s * vkq;
                    at(v, k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    throw std::runtime_error("metrics: jacobi eigensolver failed to converge");
}

std::vector<double> eigenvalues_sym(std::vector<double> a, int n, std::vector<double>* vectors) {
    std::vector<double> v;
    jacobi_eigensym(a, n, v);
    std::vector<double> lam(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) lam[static_cast<size_t>(i)] = a[static_cast<size_t>(i) * n + i];
    if (vectors != nullptr) *vectors = std::move(v);
    return lam;
}

// V diag(sqrt(max(lam,0))) V^T for a symmetric positive semidefinite matrix
std::vector<double> sqrtm_psd(const std::vector<double>& m, int n) {
    std::vector<double> v;
    std::vector<double> lam = eigenvalues_sym(m, n, &v);
    std::vector<double> out(static_cast<size_t>(n) * n, 0.0);
    for (int k = 0; k < n; ++k) {
        double s = std::sqrt(std::max(lam[static_cast<size_t>(k)], 0.0));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                out[static_cast<size_t>(i) * n + j] +=
                    s * v[static_cast<size_t>(i) * n + k] * v[static_cast<size_t>(j) * n + k];
    }
    return out;
}

void mean_and_cov(const std::vector<double>& rows, int64_t n, int64_t d, std::vector<double>& mu,
                  std::vector<double>& cov) {
    mu.assign(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < d; ++k) mu[static_cast<size_t>(k)] += rows[static_cast<size_t>(i * d + k)];
    for (double& m : mu) m /= static_cast<double>(n);
    cov.assign(static_cast<size_t>(d) * static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t r = 0; r < d; ++r) {
            double xr = rows[static_cast<size_t>(i * d + r)] - mu[static_cast<size_t>(r)];
            for (int64_t c = r; c < d; ++c) {
                double xc = rows[static_cast<size_t>(i * d + c)] - mu[static_cast<size_t>(c)];
                cov[static_cast<size_t>(r * d + c)] += xr * xc;
            }
        }
    }
    for (int64_t r = 0; r < d; ++r)
        for (int64_t c = r; c < d; ++c) {
            double v = cov[static_cast<size_t>(r * d + c)] / static_cast<double>(n - 1);
            cov[static_cast<size_t>(r * d + c)] = v;
            cov[static_cast<size_t>(c * d + r)] = v;
        }
    for (int64_t r = 0; r < d; ++r) cov[static_cast<size_t>(r * d + r)] += 1e-6;
}

}  // namespace

FeatureMap::FeatureMap(FeatureMapSpec spec, int in_dim) : spec_(spec), in_dim_(in_dim) {
    if (in_dim <= 0) throw std::runtime_error("feature map: in_dim must be positive");
    if (spec_.kind == FeatureKind::raw) return;
    if (spec_.out_dim <= 0) throw std::runtime_error("feature map: out_dim must be positive");
    const int hidden = 64;
    Rng rw(seed_stream(spec_.seed, "fmap.w"));
    w_ = rw.normal_tensor({hidden, in_dim}, DType::f64);
    Rng rb(seed_stream(spec_.seed, "fmap.b"));
    b_ = Tensor::zeros({hidden}, DType::f64);
    for (int64_t i = 0; i < hidden; ++i) b_.set(i, rb.uniform() * 2.0 * M_PI);
    Rng rp(seed_stream(spec_.seed, "fmap.p"));
    p_ = init_normal({spec_.out_dim, hidden}, hidden, rp, DType::f64);
}

int FeatureMap::out_dim() const {
    return spec_.kind == FeatureKind::raw ? in_dim_ : spec_.out_dim;
}

Tensor FeatureMap::apply(const Tensor& x) const {
    if (x.dims().size() < 2) throw std::runtime_error("feature map: input must be [n, ...]");
    int64_t n = x.dims()[0];
    int64_t d = x.numel() / n;
    if (d != in_dim_) throw std::runtime_error("feature map: sample dim mismatch");
    Tape t(16);
    Value v = t.reshape(t.constant(x.astype(DType::f64)), {n, d});
    if (spec_.kind == FeatureKind::raw) return v.val();
    Value z = t.add(t.matmul(v, t.transpose(t.constant(w_))), t.expand_rows(t.constant(b_), n));
    Value phi = t.mul_c(t.sin(z), std::sqrt(2.0 / 64.0));
    return t.matmul(phi, t.transpose(t.constant(p_))).val();
}

double frechet_distance(const Tensor& a, const Tensor& b, const FeatureMap& fm) {
    Tensor fa = fm.apply(a), fb = fm.apply(b);
    int64_t na = 0, nb = 0, d = 0, db = 0;
    std::vector<double> ra = rows_of(fa, na, d);
    std::vector<double> rb = rows_of(fb, nb, db);
    if (na < d + 1 || nb < d + 1)
        throw std::runtime_error("frechet: each set needs at least dim+1 samples");

    std::vector<double> mu1, mu2, c1, c2;
    mean_and_cov(ra, na, d, mu1, c1);
    mean_and_cov(rb, nb, d, mu2, c2);

    int nd = static_cast<int>(d);
    std::vector<double> s1 = sqrtm_psd(c1, nd);
    // m = s1 c2 s1, symmetrized against roundoff before the eigensolve
    std::vector<double> tmp(static_cast<size_t>(d) * d, 0.0), m(static_cast<size_t>(d) * d, 0.0);
    for (int64_t i = 0; i < d; ++i)
        for (int64_t k = 0; k < d; ++k) {
            double sik = s1[static_cast<size_t>(i * d + k)];
            if (sik == 0.0) continue;
            for (int64_t j = 0; j < d; ++j)
                tmp[static_cast<size_t>(i * d + j)] += sik * c2[static_cast<size_t>(k * d + j)];
        }
    for (int64_t i = 0; i < d; ++i)
        for (int64_t k = 0; k < d; ++k) {
            double tik = tmp[static_cast<size_t>(i * d + k)];
            if (tik == 0.0) continue;
            for (int64_t j = 0; j < d; ++j)
                m[static_cast<size_t>(i * d + j)] += tik * s1[static_cast<size_t>(k * d + j)];
        }
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = i + 1; j < d; ++j) {
            double v = 0.5 * (m[static_cast<size_t>(i * d + j)] + m[static_cast<size_t>(j * d + i)]);
            m[static_cast<size_t>(i * d + j)] = v;
            m[static_cast<size_t>(j * d + i)] = v;
        }

    std::vector<double> lam = eigenvalues_sym(m, nd, nullptr);
    double tr_sqrt = 0.0;
    for (double l : lam) tr_sqrt += std::sqrt(std::max(l, 0.0));
    double dist = 0.0;
    for (int64_t k = 0; k < d; ++k) {
        double diff = mu1[static_cast<size_t>(k)] - mu2[static_cast<size_t>(k)];
        dist += diff * diff;
        dist += c1[static_cast<size_t>(k * d + k)] + c2[static_cast<size_t>(k * d + k)];
    }
    dist -= 2.0 * tr_sqrt;
    return std::max(dist, 0.0);
}

double median_bandwidth(const Tensor& a, const Tensor& b) {
    int64_t na = 0, nb = 0, da = 0, db = 0;
    std::vector<double> ra = rows_of(a, na, da);
    std::vector<double> rb = rows_of(b, nb, db);
    if (da != db) throw std::runtime_error("mmd: sample dims differ");
    int64_t ca = std::min<int64_t>(na, 512), cb = std::min<int64_t>(nb, 512);
    std::vector<double> pool;
    pool.reserve(static_cast<size_t>((ca + cb) * da));
    pool.insert(pool.end(), ra.begin(), ra.begin() + ca * da);
    pool.insert(pool.end(), rb.begin(), rb.begin() + cb * da);
    int64_t n = ca + cb;
    std::vector<double> dist;
    dist.reserve(static_cast<size_t>(n * (n - 1) / 2));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j)
            dist.push_back(std::sqrt(sq_dist(&pool[static_cast<size_t>(i * da)],
                                             &pool[static_cast<size_t>(j * da)], da)));
    if (dist.empty()) return 1.0;
    size_t mid = dist.size() / 2;
    std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
    double med = dist[mid];
    return med > 0.0 ? med : 1.0;
}

double mmd2_unbiased(const Tensor& a, const Tensor& b, std::optional<double> bandwidth) {
    int64_t m = 0, n = 0, da = 0, db = 0;
    std::vector<double> ra = rows_of(a, m, da);
    std::vector<double> rb = rows_of(b, n, db);
    if (da != db) throw std::runtime_error("mmd: sample dims differ");
    if (m < 2 || n < 2) throw std::runtime_error("mmd: each set needs at least 2 samples");
    double bw = bandwidth.has_value() ? *bandwidth : median_bandwidth(a, b);
    if (bw <= 0.0) throw std::runtime_error("mmd: bandwidth must be positive");
    double inv = 1.0 / (2.0 * bw * bw);

    KahanSum kxx, kyy, kxy;
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = i + 1; j < m; ++j)
            kxx.add(std::exp(-inv * sq_dist(&ra[static_cast<size_t>(i * da)],
                                            &ra[static_cast<size_t>(j * da)], da)));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j)
            kyy.add(std::exp(-inv * sq_dist(&rb[static_cast<size_t>(i * da)],
                                            &rb[static_cast<size_t>(j * da)], da)));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            kxy.add(std::exp(-inv * sq_dist(&ra[static_cast<size_t>(i * da)],
                                            &rb[static_cast<size_t>(j * da)], da)));

    double mm = static_cast<double>(m), nn = static_cast<double>(n);
    return 2.0 * kxx.s / (mm * (mm - 1.0)) + 2.0 * kyy.s / (nn * (nn - 1.0)) -
           2.0 * kxy.s / (mm * nn);
}

ModeCoverage mode_coverage(const Tensor& samples, const Tensor& centers, double radius) {
    if (radius <= 0.0) throw std::runtime_error("mode coverage: radius must be positive");
    int64_t n = 0, d = 0, nm = 0, dm = 0;
    std::vector<double> rs = rows_of(samples, n, d);
    std::vector<double> rc = rows_of(centers, nm, dm);
    if (d != dm) throw std::runtime_error("mode coverage: center dim mismatch");
    if (nm < 1) throw std::runtime_error("mode coverage: at least one center required");

    ModeCoverage out;
    out.fraction.assign(static_cast<size_t>(nm), 0.0);
    int64_t background = 0;
    for (int64_t i = 0; i < n; ++i) {
        int64_t best = 0;
        double best_d = sq_dist(&rs[static_cast<size_t>(i * d)], &rc[0], d);
        for (int64_t c = 1; c < nm; ++c) {
            double dist = sq_dist(&rs[static_cast<size_t>(i * d)], &rc[static_cast<size_t>(c * d)], d);
            if (dist < best_d) {
                best_d = dist;
                best = c;
            }
        }
        if (best_d <= radius * radius)
            out.fraction[static_cast<size_t>(best)] += 1.0;
        else
            ++background;
    }
    for (double& f : out.fraction) f /= static_cast<double>(n);
    out.background = static_cast<double>(background) / static_cast<double>(n);
    return out;
}

std::vector<RelAbsRow> rel_abs_sweep(const SampleSet& student,
                                     const std::vector<std::pair<int, SampleSet>>& teachers,
                                     const Tensor& data, const FeatureMap& fm) {
    std::vector<RelAbsRow> rows;
    rows.reserve(teachers.size());
    for (const auto& [k, set] : teachers) {
        if (set.seed_lo != student.seed_lo || set.seed_hi != student.seed_hi)
            throw std::runtime_error("rel/abs sweep: all models must cover the same seed range");
        RelAbsRow row;
        row.k = k;
        row.abs_metric = frechet_distance(set.samples, data, fm);
        row.rel_metric = frechet_distance(student.samples, set.samples, fm);
        rows.push_back(row);
    }
    return rows;
}

std::string to_csv(const MetricReport& report) {
    std::string out = "metric,value,n,seed_lo,seed_hi\n";
    char buf[192];
    for (const auto& [name, value] : report.values) {
        if (!std::isfinite(value)) throw std::runtime_error("metric report: non-finite value for " + name);
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%lld,%llu,%llu\n", name.c_str(), value,
                      static_cast<long long>(report.n), static_cast<unsigned long long>(report.seed_lo),
                      static_cast<unsigned long long>(report.seed_hi));
        out += buf;
    }
    return out;
}

}  // namespace ddl
