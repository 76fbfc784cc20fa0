#include "ttrx/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <queue>

#include "ttrx/errors.hpp"

namespace ttrx {

namespace {

constexpr int kMaxAttempts = 100;
constexpr std::size_t kCurveSegments = 48;
constexpr double kMaxCoverage = 0.4;

struct Ribbon {
    double cx, cy;     // centre (pixels)
    double heading;    // radians, direction P0 -> P2
    double length;     // chord length (pixels)
    double bend;       // control-point offset as a fraction of length
    double half_width; // pixels
    double elevation;  // out-of-plane tilt of the fibre direction (radians)
};

// Signed distance (half_width - distance to centreline) and the unit tangent
// of the nearest centreline segment, per pixel.
struct RibbonField {
    std::vector<double> s;
    std::vector<double> tx, ty, tz;
};

RibbonField rasterize(const Ribbon& r, std::size_t h, std::size_t w) {
    const double ux = std::cos(r.heading), uy = std::sin(r.heading);
    const double nx = -uy, ny = ux;
    const double p0x = r.cx - 0.5 * r.length * ux, p0y = r.cy - 0.5 * r.length * uy;
    const double p2x = r.cx + 0.5 * r.length * ux, p2y = r.cy + 0.5 * r.length * uy;
    const double p1x = r.cx + r.bend * r.length * nx, p1y = r.cy + r.bend * r.length * ny;

    std::array<double, kCurveSegments + 1> px{}, py{};
    for (std::size_t i = 0; i <= kCurveSegments; ++i) {
        const double t = static_cast<double>(i) / kCurveSegments, u = 1.0 - t;
        px[i] = u * u * p0x + 2 * u * t * p1x + t * t * p2x;
        py[i] = u * u * p0y + 2 * u * t * p1y + t * t * p2y;
    }
    std::array<double, kCurveSegments> dx{}, dy{}, len2{}, tnx{}, tny{};
    for (std::size_t i = 0; i < kCurveSegments; ++i) {
        dx[i] = px[i + 1] - px[i];
        dy[i] = py[i + 1] - py[i];
        len2[i] = dx[i] * dx[i] + dy[i] * dy[i];
        const double l = std::sqrt(len2[i]);
        tnx[i] = dx[i] / l;
        tny[i] = dy[i] / l;
    }

    const double in_plane = std::cos(r.elevation), tilt = std::sin(r.elevation);
    RibbonField f;
    f.s.resize(h * w);
    f.tx.resize(h * w);
    f.ty.resize(h * w);
    f.tz.assign(h * w, tilt);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double qx = static_cast<double>(x) + 0.5, qy = static_cast<double>(y) + 0.5;
            double best = std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (std::size_t i = 0; i < kCurveSegments; ++i) {
                double t = ((qx - px[i]) * dx[i] + (qy - py[i]) * dy[i]) / len2[i];
                t = std::clamp(t, 0.0, 1.0);
                const double ex = px[i] + t * dx[i] - qx, ey = py[i] + t * dy[i] - qy;
                const double d2 = ex * ex + ey * ey;
                if (d2 < best) {
                    best = d2;
                    arg = i;
                }
            }
            const std::size_t v = y * w + x;
            f.s[v] = r.half_width - std::sqrt(best);
            f.tx[v] = in_plane * tnx[arg];
            f.ty[v] = in_plane * tny[arg];
        }
    }
    return f;
}

std::vector<std::uint8_t> to_mask(const std::vector<double>& s) {
    std::vector<std::uint8_t> m(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) m[i] = s[i] >= 0.0 ? 1 : 0;
    return m;
}

// Labels each 8-connected foreground component; returns the component count.
std::size_t label_components(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w,
                             std::vector<int>& labels) {
    labels.assign(m.size(), -1);
    int next = 0;
    std::queue<std::size_t> q;
    for (std::size_t start = 0; start < m.size(); ++start) {
        if (!m[start] || labels[start] >= 0) continue;
        labels[start] = next;
        q.push(start);
        while (!q.empty()) {
            const std::size_t v = q.front();
            q.pop();
            const long y = static_cast<long>(v / w), x = static_cast<long>(v % w);
            for (long oy = -1; oy <= 1; ++oy)
                for (long ox = -1; ox <= 1; ++ox) {
                    const long yy = y + oy, xx = x + ox;
                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                    const std::size_t u = static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx);
                    if (m[u] && labels[u] < 0) {
                        labels[u] = next;
                        q.push(u);
                    }
                }
        }
        ++next;
    }
    return static_cast<std::size_t>(next);
}

std::size_t mask_count(const std::vector<std::uint8_t>& m) {
    return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
}

// Nonempty, under the coverage cap, one 8-connected component.
bool valid_mask(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w) {
    const std::size_t n = mask_count(m);
    if (n == 0 || static_cast<double>(n) >= kMaxCoverage * static_cast<double>(m.size())) return false;
    std::vector<int> labels;
    return label_components(m, h, w, labels) == 1;
}

// Keeps only the largest component (ties: lowest label).
void keep_largest_component(std::vector<std::uint8_t>& m, std::size_t h, std::size_t w) {
    std::vector<int> labels;
    const std::size_t n = label_components(m, h, w, labels);
    if (n <= 1) return;
    std::vector<std::size_t> sizes(n, 0);
    for (int l : labels)
        if (l >= 0) ++sizes[static_cast<std::size_t>(l)];
    const int keep = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    for (std::size_t i = 0; i < m.size(); ++i)
        if (labels[i] != keep) m[i] = 0;
}

std::size_t overlap(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += a[i] & b[i];
    return n;
}

struct CohortTemplate {
    std::vector<Ribbon> existing;
    std::vector<Ribbon> independent;
    std::vector<NovelTractSpec> specs;
};

std::vector<double> combine(const RibbonField& a, const RibbonField& b, double shift_a, double shift_b,
                            Combination c) {
    std::vector<double> s(a.s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double sa = a.s[i] + shift_a, sb = b.s[i] + shift_b;
        s[i] = c == Combination::Intersection ? std::min(sa, sb) : std::max(sa, sb);
    }
    return s;
}

std::vector<double> blend(const std::vector<double>& combined, const std::vector<double>& independent, double rho) {
    std::vector<double> s(combined.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = rho * combined[i] + (1.0 - rho) * independent[i];
    return s;
}

Ribbon draw_ribbon(double heading, const CohortConfig& cfg, RngState& rng) {
    const double scale = static_cast<double>(std::min(cfg.height, cfg.width));
    const double unit = scale / 64.0;
    return Ribbon{rng.uniform(0.3, 0.7) * static_cast<double>(cfg.width),
                  rng.uniform(0.3, 0.7) * static_cast<double>(cfg.height),
                  heading,
                  rng.uniform(0.55, 0.85) * scale,
                  rng.uniform(-0.08, 0.08),
                  rng.uniform(1.6, 2.6) * unit,
                  rng.uniform(-1.0, 1.0)};
}

Ribbon jittered(const Ribbon& r, double j, RngState& rng) {
    if (j == 0.0) return r;
    Ribbon out = r;
    out.cx += rng.normal(0.0, 1.5 * j);
    out.cy += rng.normal(0.0, 1.5 * j);
    out.heading += rng.normal(0.0, 0.04 * j);
    out.length *= 1.0 + std::clamp(rng.normal(0.0, 0.05 * j), -0.2, 0.2);
    out.bend += rng.normal(0.0, 0.01 * j);
    out.half_width *= 1.0 + std::clamp(rng.normal(0.0, 0.05 * j), -0.2, 0.2);
    out.elevation += rng.normal(0.0, 0.03 * j);
    return out;
}

CohortTemplate draw_template(const CohortConfig& cfg) {
    RngState rng(derive_seed(cfg.seed, {0x7e3a}));
    const std::size_t h = cfg.height, w = cfg.width, m = cfg.existing_tracts;
    CohortTemplate tpl;

    // Existing headings are spread evenly over the circle in a random order
    // so that each tract has a distinct local direction.
    std::vector<std::size_t> order(m);
    for (std::size_t i = 0; i < m; ++i) order[i] = i;
    for (std::size_t i = m; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const double sector = 2.0 * std::numbers::pi / static_cast<double>(m);

    std::vector<RibbonField> fields;
    std::vector<std::vector<std::uint8_t>> masks;
    for (std::size_t k = 0; k < m; ++k) {
        bool ok = false;
        for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
            const double heading = (static_cast<double>(order[k]) + rng.uniform(-0.15, 0.15)) * sector;
            Ribbon r = draw_ribbon(heading, cfg, rng);
            auto f = rasterize(r, h, w);
            auto mk = to_mask(f.s);
            if (!valid_mask(mk, h, w)) continue;
            tpl.existing.push_back(r);
            fields.push_back(std::move(f));
            masks.push_back(std::move(mk));
            ok = true;
        }
        if (!ok) throw GenerationError("could not place existing tract " + std::to_string(k));
    }

    std::vector<std::pair<std::size_t, std::size_t>> used;
    for (std::size_t j = 0; j < cfg.novel_tracts; ++j) {
        bool ok = false;
        for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
            const Combination comb = rng.bernoulli(0.5) ? Combination::Union : Combination::Intersection;
            std::size_t a = rng.below(m), b = rng.below(m);
            if (a == b) continue;
            if (a > b) std::swap(a, b);
            // Parents must cross; prefer pairs not used by another novel tract.
            const std::size_t min_overlap = comb == Combination::Intersection ? 12 : 1;
            if (overlap(masks[a], masks[b]) < min_overlap) continue;
            if (attempt < kMaxAttempts / 2 && std::find(used.begin(), used.end(), std::pair{a, b}) != used.end())
                continue;
            Ribbon ind = draw_ribbon(rng.uniform(0.0, 2.0 * std::numbers::pi), cfg, rng);
            auto fi = rasterize(ind, h, w);
            auto combined = combine(fields[a], fields[b], 0.0, 0.0, comb);
            if (!valid_mask(to_mask(combined), h, w)) continue;
            if (!valid_mask(to_mask(fi.s), h, w)) continue;
            auto mixed = to_mask(blend(combined, fi.s, cfg.correlation));
            keep_largest_component(mixed, h, w);
            if (!valid_mask(mixed, h, w)) continue;
            tpl.independent.push_back(ind);
            tpl.specs.push_back(NovelTractSpec{a, b, comb});
            used.emplace_back(a, b);
            ok = true;
        }
        if (!ok) throw GenerationError("could not construct novel tract " + std::to_string(j));
    }
    return tpl;
}

SyntheticSubject generate_subject(const CohortConfig& cfg, const CohortTemplate& tpl, std::uint64_t id) {
    const std::size_t h = cfg.height, w = cfg.width, v = h * w;
    const std::size_t m = cfg.existing_tracts, n = cfg.novel_tracts;
    RngState rng(derive_seed(cfg.seed, {0x5b1, id}));

    std::vector<RibbonField> ex_fields(m);
    std::vector<std::vector<std::uint8_t>> ex_masks(m);
    for (std::size_t k = 0; k < m; ++k) {
        bool ok = false;
        for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
            ex_fields[k] = rasterize(jittered(tpl.existing[k], cfg.jitter, rng), h, w);
            ex_masks[k] = to_mask(ex_fields[k].s);
            ok = valid_mask(ex_masks[k], h, w);
        }
        if (!ok)
            throw GenerationError("subject " + std::to_string(id) + ": infeasible geometry for existing tract " +
                                  std::to_string(k));
    }

    std::vector<RibbonField> ind_fields(n);
    std::vector<std::vector<std::uint8_t>> nv_masks(n);
    for (std::size_t j = 0; j < n; ++j) {
        const auto& spec = tpl.specs[j];
        bool ok = false;
        for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
            ind_fields[j] = rasterize(jittered(tpl.independent[j], cfg.jitter, rng), h, w);
            const double shift_a = cfg.jitter == 0.0 ? 0.0 : rng.normal(0.0, 0.3 * cfg.jitter);
            const double shift_b = cfg.jitter == 0.0 ? 0.0 : rng.normal(0.0, 0.3 * cfg.jitter);
            auto combined = combine(ex_fields[spec.parent_a], ex_fields[spec.parent_b], shift_a, shift_b,
                                    spec.combination);
            nv_masks[j] = to_mask(blend(combined, ind_fields[j].s, cfg.correlation));
            keep_largest_component(nv_masks[j], h, w);
            ok = valid_mask(nv_masks[j], h, w);
        }
        if (!ok)
            throw GenerationError("subject " + std::to_string(id) + ": infeasible geometry for novel tract " +
                                  std::to_string(j));
    }

    SyntheticSubject s;
    s.id = id;
    s.existing_labels = Tensor(Shape{m, h, w});
    s.novel_labels = Tensor(Shape{n, h, w});
    s.input = Tensor(Shape{kInputChannels, h, w});
    for (std::size_t k = 0; k < m; ++k)
        for (std::size_t p = 0; p < v; ++p) s.existing_labels[k * v + p] = ex_masks[k][p];
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < v; ++p) s.novel_labels[j * v + p] = nv_masks[j][p];

    // Each pixel encodes at most three bundles: novel tracts first, then
    // existing tracts, each group in index order.
    for (std::size_t p = 0; p < v; ++p) {
        std::size_t slot = 0;
        auto put = [&](const RibbonField& f) {
            if (slot >= kMaxOrientations) return;
            s.input[(3 * slot + 0) * v + p] = f.tx[p];
            s.input[(3 * slot + 1) * v + p] = f.ty[p];
            s.input[(3 * slot + 2) * v + p] = f.tz[p];
            ++slot;
        };
        for (std::size_t j = 0; j < n; ++j)
            if (nv_masks[j][p]) put(ind_fields[j]);
        for (std::size_t k = 0; k < m; ++k)
            if (ex_masks[k][p]) put(ex_fields[k]);
        if (cfg.noise_std > 0.0) {
            // The first slot carries noise everywhere; further slots only when occupied.
            const std::size_t noisy = std::max<std::size_t>(slot, 1);
            for (std::size_t q = 0; q < noisy; ++q) {
                s.input[(3 * q + 0) * v + p] += rng.normal(0.0, cfg.noise_std);
                s.input[(3 * q + 1) * v + p] += rng.normal(0.0, cfg.noise_std);
                s.input[(3 * q + 2) * v + p] += rng.normal(0.0, cfg.noise_std);
            }
        }
    }
    return s;
}

}  // namespace

void CohortConfig::validate() const {
    if (height == 0 || width == 0) throw ConfigError("cohort: height and width must be positive");
    if (height % 4 || width % 4) throw ConfigError("cohort: height and width must be divisible by 4");
    if (existing_tracts < 2) throw ConfigError("cohort: need at least two existing tracts");
    if (novel_tracts < 1) throw ConfigError("cohort: need at least one novel tract");
    if (!(correlation >= 0.0 && correlation <= 1.0)) throw ConfigError("cohort: correlation must lie in [0, 1]");
    if (existing_train < 1 || existing_val < 1 || fewshot_train < 1 || test < 1)
        throw ConfigError("cohort: split counts must be >= 1 (fewshot_val may be 0)");
    if (!(noise_std >= 0.0)) throw ConfigError("cohort: noise_std must be >= 0");
    if (!(jitter >= 0.0)) throw ConfigError("cohort: jitter must be >= 0");
}

Cohort generate_cohort(const CohortConfig& config) {
    config.validate();
    const CohortTemplate tpl = draw_template(config);
    Cohort c;
    c.config = config;
    c.novel_specs = tpl.specs;
    std::uint64_t next_id = 0;
    auto fill = [&](std::vector<SyntheticSubject>& out, std::size_t count) {
        for (std::size_t i = 0; i < count; ++i) out.push_back(generate_subject(config, tpl, next_id++));
    };
    fill(c.existing.train, config.existing_train);
    fill(c.existing.val, config.existing_val);
    fill(c.fewshot.train, config.fewshot_train);
    fill(c.fewshot.val, config.fewshot_val);
    fill(c.fewshot.test, config.test);
    return c;
}

FewShotSplit subsample_fewshot(const FewShotSplit& split, std::size_t k_train, std::size_t k_val, std::uint64_t seed) {
    if (k_train < 1) throw DataError("subsample_fewshot: k_train must be >= 1");
    if (k_train > split.train.size() || k_val > split.val.size())
        throw DataError("subsample_fewshot: requested " + std::to_string(k_train) + "/" + std::to_string(k_val) +
                        " subjects but only " + std::to_string(split.train.size()) + "/" +
                        std::to_string(split.val.size()) + " are available");
    RngState rng(derive_seed(seed, {0x5b5a}));
    auto pick = [&rng](const std::vector<SyntheticSubject>& pool, std::size_t k) {
        std::vector<std::size_t> idx(pool.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
        std::vector<SyntheticSubject> out;
        for (auto i : idx) out.push_back(pool[i]);
        return out;
    };
    FewShotSplit out;
    out.train = pick(split.train, k_train);
    out.val = pick(split.val, k_val);
    out.test = split.test;
    return out;
}

std::size_t count_components(const Tensor& masks, std::size_t channel) {
    const std::size_t h = masks.dim(1), w = masks.dim(2), v = h * w;
    std::vector<std::uint8_t> m(v);
    for (std::size_t p = 0; p < v; ++p) m[p] = masks[channel * v + p] != 0.0;
    std::vector<int> labels;
    return label_components(m, h, w, labels);
}

double mask_mcc(const Tensor& a, std::size_t ca, const Tensor& b, std::size_t cb) {
    const std::size_t v = a.dim(1) * a.dim(2);
    double tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t p = 0; p < v; ++p) {
        const bool x = a[ca * v + p] != 0.0, y = b[cb * v + p] != 0.0;
        if (x && y) ++tp;
        else if (!x && !y) ++tn;
        else if (x) ++fp;
        else ++fn;
    }
    const double den = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
    return den == 0.0 ? 0.0 : (tp * tn - fp * fn) / den;
}

}  // namespace ttrx
