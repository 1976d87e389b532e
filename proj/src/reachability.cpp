#include "rdiff/reachability.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

#include "rdiff/binio.hpp"

namespace rdiff::reach {
namespace {

constexpr double kTwoPi = 2.0 * kPi;

void write_axis(std::ostream& out, const Axis& a) {
    binio::write_pod<double>(out, a.lo);
    binio::write_pod<double>(out, a.hi);
    binio::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(a.n));
}

Axis read_axis(std::istream& in, bool periodic) {
    Axis a;
    a.lo = binio::read_pod<double>(in, "axis lo");
    a.hi = binio::read_pod<double>(in, "axis hi");
    a.n = static_cast<int>(binio::read_pod<std::uint32_t>(in, "axis count"));
    a.periodic = periodic;
    if (a.n < 2 || a.n > 100000 || !(a.hi > a.lo)) {
        fail(ErrorKind::io, "corrupt grid axis in value function file");
    }
    return a;
}

// Fractional index along a non-periodic axis, or nullopt when outside.
std::optional<double> axis_fraction(const Axis& a, double x) {
    const double f = (x - a.lo) / a.spacing();
    constexpr double kSlack = 1e-9;
    if (f < -kSlack || f > (a.n - 1) + kSlack) {
        return std::nullopt;
    }
    return std::clamp(f, 0.0, static_cast<double>(a.n - 1));
}

double axis_fraction_clamped(const Axis& a, double x) {
    return std::clamp((x - a.lo) / a.spacing(), 0.0, static_cast<double>(a.n - 1));
}

// Second-order ENO one-sided differences at index i of a line of n samples.
// At the box edges the line is extended linearly.
template <class F>
void eno2(F&& f, int i, int n, double h, double& dm, double& dp) {
    auto val = [&](int k) {
        if (k < 0) return f(0) + k * (f(1) - f(0));
        if (k >= n) return f(n - 1) + (k - n + 1) * (f(n - 1) - f(n - 2));
        return f(k);
    };
    const double vm2 = val(i - 2), vm1 = val(i - 1), v0 = val(i), vp1 = val(i + 1), vp2 = val(i + 2);
    auto minmod_abs = [](double a, double b) { return std::abs(a) <= std::abs(b) ? a : b; };
    const double d2m = minmod_abs(vm2 - 2 * vm1 + v0, vm1 - 2 * v0 + vp1);
    const double d2p = minmod_abs(vm1 - 2 * v0 + vp1, v0 - 2 * vp1 + vp2);
    dm = (v0 - vm1) / h + 0.5 * d2m / h;
    dp = (vp1 - v0) / h - 0.5 * d2p / h;
}

template <class F>
void eno2_periodic(F&& f, int i, double h, double& dm, double& dp) {
    const double vm2 = f(i - 2), vm1 = f(i - 1), v0 = f(i), vp1 = f(i + 1), vp2 = f(i + 2);
    auto minmod_abs = [](double a, double b) { return std::abs(a) <= std::abs(b) ? a : b; };
    const double d2m = minmod_abs(vm2 - 2 * vm1 + v0, vm1 - 2 * v0 + vp1);
    const double d2p = minmod_abs(vm1 - 2 * v0 + vp1, v0 - 2 * vp1 + vp2);
    dm = (v0 - vm1) / h + 0.5 * d2m / h;
    dp = (vp1 - v0) / h - 0.5 * d2p / h;
}

}  // namespace

void ReachSpec::validate() const {
    if (!(v_max > 0.0) || !(turn_bound > 0.0) || !(accel_bound > 0.0) || !(horizon >= 0.0) ||
        !(target_radius > 0.0)) {
        fail(ErrorKind::validation, "reach spec fields must be positive (horizon non-negative)");
    }
}

Grid3 Grid3::default_for(const ReachSpec& spec, int spatial_points, int heading_points, double margin) {
    const double half = spec.reach_radius() + margin;
    Grid3 g;
    g.x = Axis{-half, half, spatial_points, false};
    g.y = Axis{-half, half, spatial_points, false};
    g.theta = Axis{-kPi, kPi, heading_points, true};
    return g;
}

void Grid3::validate_for(const ReachSpec& spec) const {
    if (x.n < 21 || y.n < 21) {
        fail(ErrorKind::validation, "reachability grid needs at least 21 points per spatial axis");
    }
    if (theta.n < 4 || !theta.periodic) {
        fail(ErrorKind::validation, "heading axis must be periodic with at least 4 points");
    }
    const double need = spec.reach_radius();
    if (x.lo > -need || x.hi < need || y.lo > -need || y.hi < need) {
        fail(ErrorKind::validation, "reachability grid does not cover a square of half-width " + std::to_string(need));
    }
}

// ---------------------------------------------------------------------------
// ValueFunction

ValueFunction::ValueFunction(ReachSpec spec, Grid3 grid, std::vector<double> values)
    : spec_(spec), grid_(grid), values_(std::move(values)) {
    if (values_.size() != grid_.size()) {
        fail(ErrorKind::dimension, "value array does not match grid size");
    }
}

double ValueFunction::trilinear(double fx, double fy, double theta) const {
    const int ix0 = std::min(static_cast<int>(fx), grid_.x.n - 2);
    const int iy0 = std::min(static_cast<int>(fy), grid_.y.n - 2);
    const double tx = fx - ix0;
    const double ty = fy - iy0;

    double ft = (wrap_angle(theta) - grid_.theta.lo) / grid_.theta.spacing();
    ft = std::fmod(ft, static_cast<double>(grid_.theta.n));
    if (ft < 0.0) {
        ft += grid_.theta.n;
    }
    int it0 = static_cast<int>(ft);
    if (it0 >= grid_.theta.n) {
        it0 = 0;
    }
    const double tt = ft - it0;
    const int it1 = (it0 + 1) % grid_.theta.n;

    auto lerp_t = [&](int ix, int iy) { return (1.0 - tt) * at(ix, iy, it0) + tt * at(ix, iy, it1); };
    const double v00 = lerp_t(ix0, iy0);
    const double v01 = lerp_t(ix0, iy0 + 1);
    const double v10 = lerp_t(ix0 + 1, iy0);
    const double v11 = lerp_t(ix0 + 1, iy0 + 1);
    return (1.0 - tx) * ((1.0 - ty) * v00 + ty * v01) + tx * ((1.0 - ty) * v10 + ty * v11);
}

std::optional<double> ValueFunction::interpolate(double x, double y, double theta) const {
    const auto fx = axis_fraction(grid_.x, x);
    const auto fy = axis_fraction(grid_.y, y);
    if (!fx || !fy) {
        return std::nullopt;
    }
    return trilinear(*fx, *fy, theta);
}

double ValueFunction::interpolate_clamped(double x, double y, double theta) const {
    return trilinear(axis_fraction_clamped(grid_.x, x), axis_fraction_clamped(grid_.y, y), theta);
}

void ValueFunction::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    }
    binio::write_magic(out, "RDVF");
    binio::write_pod<std::uint32_t>(out, kVersion);
    for (double f : {spec_.v_max, spec_.turn_bound, spec_.accel_bound, spec_.horizon, spec_.target_radius}) {
        binio::write_pod<double>(out, f);
    }
    write_axis(out, grid_.x);
    write_axis(out, grid_.y);
    write_axis(out, grid_.theta);
    binio::write_f64s(out, values_);
    if (!out) {
        fail(ErrorKind::io, "write failed for '" + path.string() + "'");
    }
}

ValueFunction ValueFunction::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open value function '" + path.string() + "'");
    }
    binio::expect_magic(in, "RDVF");
    const auto version = binio::read_pod<std::uint32_t>(in, "version");
    if (version != kVersion) {
        fail(ErrorKind::io, "unsupported value function version " + std::to_string(version));
    }
    ReachSpec spec;
    spec.v_max = binio::read_pod<double>(in, "v_max");
    spec.turn_bound = binio::read_pod<double>(in, "turn_bound");
    spec.accel_bound = binio::read_pod<double>(in, "accel_bound");
    spec.horizon = binio::read_pod<double>(in, "horizon");
    spec.target_radius = binio::read_pod<double>(in, "target_radius");
    Grid3 grid;
    grid.x = read_axis(in, false);
    grid.y = read_axis(in, false);
    grid.theta = read_axis(in, true);
    std::vector<double> values(grid.size());
    binio::read_f64s(in, values, "values");
    return ValueFunction(spec, grid, std::move(values));
}

// ---------------------------------------------------------------------------
// Solver

ValueFunction solve_brs(const ReachSpec& spec, const Grid3& grid, const SolverOptions& options) {
    spec.validate();
    grid.validate_for(spec);
    if (!(options.cfl > 0.0 && options.cfl <= 1.0)) {
        fail(ErrorKind::validation, "CFL number must be in (0, 1], got " + std::to_string(options.cfl));
    }

    const int nx = grid.x.n;
    const int ny = grid.y.n;
    const int nt = grid.theta.n;
    const double dx = grid.x.spacing();
    const double dy = grid.y.spacing();
    const double dth = grid.theta.spacing();
    const double speed = spec.v_max;
    const double omega = spec.turn_bound;

    std::vector<double> values(grid.size());
    for (int ix = 0; ix < nx; ++ix) {
        for (int iy = 0; iy < ny; ++iy) {
            const double sd = std::hypot(grid.x.coord(ix), grid.y.coord(iy)) - spec.target_radius;
            for (int it = 0; it < nt; ++it) {
                values[grid.index(ix, iy, it)] = sd;
            }
        }
    }

    // Global Lax-Friedrichs coefficients: bounds on |dH/dp| per axis.
    const double alpha_x = speed;
    const double alpha_y = speed;
    const double alpha_t = omega;
    const double max_rate = alpha_x / dx + alpha_y / dy + alpha_t / dth;
    const double max_dt = options.cfl / max_rate;

    std::vector<double> cos_t(static_cast<std::size_t>(nt));
    std::vector<double> sin_t(static_cast<std::size_t>(nt));
    for (int it = 0; it < nt; ++it) {
        cos_t[static_cast<std::size_t>(it)] = std::cos(grid.theta.coord(it));
        sin_t[static_cast<std::size_t>(it)] = std::sin(grid.theta.coord(it));
    }

    auto rates = [&](const std::vector<double>& v, std::vector<double>& out) {
        parallel_for(static_cast<std::size_t>(nt), options.threads, [&](std::size_t its) {
            const int it = static_cast<int>(its);
            auto at_t = [&](int ix, int iy, int k) { return v[grid.index(ix, iy, ((k % nt) + nt) % nt)]; };
            const double c = cos_t[its];
            const double s = sin_t[its];
            for (int ix = 0; ix < nx; ++ix) {
                for (int iy = 0; iy < ny; ++iy) {
                    double pxm, pxp, pym, pyp, ptm, ptp;
                    eno2([&](int k) { return v[grid.index(k, iy, it)]; }, ix, nx, dx, pxm, pxp);
                    eno2([&](int k) { return v[grid.index(ix, k, it)]; }, iy, ny, dy, pym, pyp);
                    eno2_periodic([&](int k) { return at_t(ix, iy, k); }, it, dth, ptm, ptp);
                    const double px = 0.5 * (pxm + pxp);
                    const double py = 0.5 * (pym + pyp);
                    const double pt = 0.5 * (ptm + ptp);
                    // min over speed in [0, v_max] and |u| <= omega of p . f
                    const double ham = speed * std::min(0.0, px * c + py * s) - omega * std::abs(pt);
                    const double diss = 0.5 * (alpha_x * (pxp - pxm) + alpha_y * (pyp - pym) + alpha_t * (ptp - ptm));
                    out[grid.index(ix, iy, it)] = std::min(0.0, ham + diss);
                }
            }
        });
    };

    std::vector<double> rate(values.size());
    std::vector<double> stage(values.size());
    double elapsed = 0.0;
    while (elapsed < spec.horizon) {
        const double step = std::min(max_dt, spec.horizon - elapsed);
        if (step * max_rate > options.cfl * (1.0 + 1e-12)) {
            fail(ErrorKind::numeric, "CFL condition violated");
        }
        // TVD Runge-Kutta 2 (Heun).
        rates(values, rate);
        for (std::size_t i = 0; i < values.size(); ++i) {
            stage[i] = values[i] + step * rate[i];
        }
        rates(stage, rate);
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i] = 0.5 * (values[i] + stage[i] + step * rate[i]);
        }
        elapsed += step;
    }

    for (double x : values) {
        if (!std::isfinite(x)) {
            fail(ErrorKind::numeric, "value function diverged (non-finite values) for v_max=" + std::to_string(spec.v_max));
        }
    }
    return ValueFunction(spec, grid, std::move(values));
}

// ---------------------------------------------------------------------------
// Queries

Pose2 relative_pose(Pose2 query, Pose2 anchor) {
    const dynamics::Point2 p = dynamics::to_local(anchor, {query.x, query.y});
    return Pose2{p.x, p.y, wrap_angle(query.theta - anchor.theta)};
}

bool membership(const ValueFunction& vf, Pose2 query, Pose2 anchor) {
    const Pose2 rel = relative_pose(query, anchor);
    const auto v = vf.interpolate(rel.x, rel.y, rel.theta);
    return v && *v <= 0.0;
}

double soft_membership(const ValueFunction& vf, Pose2 query, Pose2 anchor, double temperature) {
    if (!(temperature > 0.0)) {
        fail(ErrorKind::validation, "soft membership temperature must be positive");
    }
    const Pose2 rel = relative_pose(query, anchor);
    return sigmoid(-vf.interpolate_clamped(rel.x, rel.y, rel.theta) / temperature);
}

const ValueFunction& select_bucket(std::span<const ValueFunction> vf_set, double arrival_speed) {
    if (vf_set.empty()) {
        fail(ErrorKind::validation, "no value functions supplied");
    }
    const ReachSpec& s0 = vf_set.front().spec();
    const double bound = arrival_speed + 0.5 * s0.accel_bound * s0.horizon;
    const ValueFunction* best = nullptr;
    const ValueFunction* smallest = &vf_set.front();
    for (const auto& vf : vf_set) {
        if (vf.spec().v_max < smallest->spec().v_max) {
            smallest = &vf;
        }
        if (vf.spec().v_max <= bound && (!best || vf.spec().v_max > best->spec().v_max)) {
            best = &vf;
        }
    }
    return best ? *best : *smallest;
}

PairGeometry pair_geometry(const Segment& prev, const Segment& cur, double dt) {
    if (prev.size() < 2 || cur.size() < 2) {
        fail(ErrorKind::dimension, "segments need at least two points");
    }
    PairGeometry g;
    const auto flat = dynamics::recover_flat_state(prev, dt);
    for (std::size_t i = 0; i < prev.size(); ++i) {
        g.prev_states.push_back(Pose2{prev[i].x, prev[i].y, flat[i].theta});
    }
    const double frame_heading = dynamics::arrival_heading(prev, 0.0);
    const dynamics::Point2 d{cur[1].x - cur[0].x, cur[1].y - cur[0].y};
    const double step_len = std::hypot(d.x, d.y);
    const double local_heading = step_len >= 1e-9 ? std::atan2(d.y, d.x) : 0.0;
    g.anchor = Pose2{prev.back().x, prev.back().y, wrap_angle(frame_heading + local_heading)};
    g.arrival_speed = step_len / dt;
    return g;
}

double segment_feasibility(std::span<const Pose2> prev_states, Pose2 anchor, const ValueFunction& vf,
                           double temperature, bool hard) {
    double score = 1.0;
    for (const Pose2& q : prev_states) {
        if (hard) {
            if (!membership(vf, q, anchor)) {
                return 0.0;
            }
        } else {
            score = std::min(score, soft_membership(vf, q, anchor, temperature));
        }
    }
    return score;
}

double action_pair_feasibility(ActionToken prev, ActionToken cur, const TokenDecoder& decoder,
                               std::span<const ValueFunction> vf_set, double temperature, bool hard, double dt) {
    const PairGeometry g = pair_geometry(decoder.decode(prev), decoder.decode(cur), dt);
    const ValueFunction& vf = select_bucket(vf_set, g.arrival_speed);
    return segment_feasibility(g.prev_states, g.anchor, vf, temperature, hard);
}

// ---------------------------------------------------------------------------
// Feasibility tables

FeasibilityTable::FeasibilityTable(int codebook_size, std::vector<double> entries, double temperature, Digest digest)
    : size_(codebook_size), entries_(std::move(entries)), temperature_(temperature), digest_(digest) {
    if (entries_.size() != static_cast<std::size_t>(size_) * static_cast<std::size_t>(size_)) {
        fail(ErrorKind::dimension, "feasibility table entries do not form a square");
    }
}

void FeasibilityTable::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    }
    binio::write_magic(out, "RDFT");
    out.write(reinterpret_cast<const char*>(digest_.data()), static_cast<std::streamsize>(digest_.size()));
    binio::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(size_));
    binio::write_f64s(out, entries_);
    if (!out) {
        fail(ErrorKind::io, "write failed for '" + path.string() + "'");
    }
}

FeasibilityTable FeasibilityTable::load(const std::filesystem::path& path, double temperature) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open feasibility table '" + path.string() + "'");
    }
    binio::expect_magic(in, "RDFT");
    Digest digest{};
    in.read(reinterpret_cast<char*>(digest.data()), static_cast<std::streamsize>(digest.size()));
    const auto j = binio::read_pod<std::uint32_t>(in, "codebook size");
    if (j == 0 || j > 65536) {
        fail(ErrorKind::io, "corrupt feasibility table size");
    }
    std::vector<double> entries(static_cast<std::size_t>(j) * j);
    binio::read_f64s(in, entries, "table entries");
    return FeasibilityTable(static_cast<int>(j), std::move(entries), temperature, digest);
}

Digest table_digest(std::span<const std::uint8_t> decoder_bytes, std::span<const ValueFunction> vf_set,
                    double temperature) {
    std::vector<std::uint8_t> buf(decoder_bytes.begin(), decoder_bytes.end());
    auto put = [&](double d) {
        std::uint8_t raw[sizeof(double)];
        std::memcpy(raw, &d, sizeof(double));
        buf.insert(buf.end(), raw, raw + sizeof(double));
    };
    put(temperature);
    for (const auto& vf : vf_set) {
        const ReachSpec& s = vf.spec();
        for (double f : {s.v_max, s.turn_bound, s.accel_bound, s.horizon, s.target_radius}) {
            put(f);
        }
        for (const Axis* a : {&vf.grid().x, &vf.grid().y, &vf.grid().theta}) {
            put(a->lo);
            put(a->hi);
            put(static_cast<double>(a->n));
        }
    }
    return sha256(buf);
}

FeasibilityTable build_feasibility_table(const TokenDecoder& decoder, std::span<const ValueFunction> vf_set,
                                         double temperature, const Digest& digest, int threads, double dt) {
    if (!(temperature > 0.0)) {
        fail(ErrorKind::validation, "table temperature must be positive");
    }
    const int j = decoder.codebook_size();
    std::vector<Segment> segments(static_cast<std::size_t>(j));
    for (int t = 0; t < j; ++t) {
        segments[static_cast<std::size_t>(t)] = decoder.decode(ActionToken{t});
    }
    std::vector<double> entries(static_cast<std::size_t>(j) * j);
    parallel_for(static_cast<std::size_t>(j), threads, [&](std::size_t prev) {
        for (int cur = 0; cur < j; ++cur) {
            const PairGeometry g = pair_geometry(segments[prev], segments[static_cast<std::size_t>(cur)], dt);
            const ValueFunction& vf = select_bucket(vf_set, g.arrival_speed);
            entries[prev * static_cast<std::size_t>(j) + static_cast<std::size_t>(cur)] =
                segment_feasibility(g.prev_states, g.anchor, vf, temperature, false);
        }
    });
    return FeasibilityTable(j, std::move(entries), temperature, digest);
}

FeasibilityTable load_or_build_table(const std::filesystem::path& path, const TokenDecoder& decoder,
                                     std::span<const ValueFunction> vf_set, double temperature,
                                     const Digest& digest, bool* rebuilt, int threads) {
    if (std::filesystem::exists(path)) {
        try {
            FeasibilityTable cached = FeasibilityTable::load(path, temperature);
            if (cached.digest() == digest && cached.size() == decoder.codebook_size()) {
                if (rebuilt) *rebuilt = false;
                return cached;
            }
        } catch (const Error&) {
            // unreadable cache: rebuild below
        }
    }
    FeasibilityTable table = build_feasibility_table(decoder, vf_set, temperature, digest, threads);
    table.save(path);
    if (rebuilt) *rebuilt = true;
    return table;
}

double sequence_feasibility(std::span<const ActionToken> tokens, const FeasibilityTable& table, bool hard) {
    if (tokens.size() < 2) {
        fail(ErrorKind::validation, "sequence feasibility needs at least two tokens");
    }
    double sum = 0.0;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        const int a = tokens[i].index;
        const int b = tokens[i + 1].index;
        if (a < 0 || b < 0 || a >= table.size() || b >= table.size()) {
            fail(ErrorKind::validation, "token index outside feasibility table");
        }
        sum += hard ? (table.hard(a, b) ? 1.0 : 0.0) : table.soft(a, b);
    }
    return sum / static_cast<double>(tokens.size() - 1);
}

}  // namespace rdiff::reach
