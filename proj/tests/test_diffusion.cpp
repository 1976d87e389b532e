#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "rdiff/diffusion.hpp"

using namespace rdiff;
using namespace rdiff::diffusion;

namespace {

DenoiserConfig tiny_config(int bits = 3) {
    DenoiserConfig c;
    c.condition_dim = 4;
    c.tokens = 3;
    c.bits = bits;
    c.time_dim = 4;
    c.hidden_dims = {16, 16};
    return c;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

reach::FeasibilityTable random_table(int j, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    std::vector<double> e(static_cast<std::size_t>(j * j));
    for (double& v : e) v = u(rng);
    return reach::FeasibilityTable(j, e, 0.1, Digest{});
}

// Independent soft-feasibility oracle: enumerate token probabilities.
double soft_oracle(const Matrix& bits, const reach::FeasibilityTable& t, double beta) {
    const int nb = static_cast<int>(bits.cols());
    const int J = 1 << nb;
    std::vector<std::vector<double>> P(static_cast<std::size_t>(bits.rows()), std::vector<double>(J));
    for (Eigen::Index s = 0; s < bits.rows(); ++s) {
        for (int j = 0; j < J; ++j) {
            double p = 1.0;
            for (int i = 0; i < nb; ++i) {
                const double q = 1.0 / (1.0 + std::exp(-2.0 * beta * bits(s, i)));
                p *= ((j >> (nb - 1 - i)) & 1) ? q : 1.0 - q;
            }
            P[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)] = p;
        }
    }
    double total = 0.0;
    for (Eigen::Index s = 1; s < bits.rows(); ++s) {
        for (int a = 0; a < J; ++a) {
            for (int b = 0; b < J; ++b) {
                total += P[static_cast<std::size_t>(s - 1)][static_cast<std::size_t>(a)] *
                         P[static_cast<std::size_t>(s)][static_cast<std::size_t>(b)] * t.soft(a, b);
            }
        }
    }
    return total / static_cast<double>(bits.rows() - 1);
}

}  // namespace

TEST_CASE("cosine schedule") {
    const NoiseSchedule s = cosine_schedule(10);
    REQUIRE(s.alpha_bar.size() == 11);
    CHECK(s.alpha_bar[0] == 1.0);
    for (int k = 1; k <= 10; ++k) CHECK(s.alpha_bar[static_cast<std::size_t>(k)] < s.alpha_bar[static_cast<std::size_t>(k - 1)]);
    CHECK(s.alpha_bar[10] <= 0.05);
    CHECK(s.alpha_bar[10] >= 0.0);

    // Closed form evaluated in long double.
    const long double off = 0.008L;
    const long double pi = 3.141592653589793238462643383279502884L;
    auto f = [&](int k) {
        const long double c = std::cos(((k / 10.0L + off) / (1.0L + off)) * pi / 2.0L);
        return c * c;
    };
    for (int k = 0; k <= 10; ++k) {
        const long double ab = f(k) / f(0);
        CHECK(std::abs(static_cast<long double>(s.alpha_bar[static_cast<std::size_t>(k)]) - ab) < 1e-12L);
        if (k >= 1) {
            const long double abp = f(k - 1) / f(0);
            const long double a = ab / abp;
            const long double sig = std::sqrt((1.0L - abp) / (1.0L - ab) * (1.0L - a));
            CHECK(std::abs(static_cast<long double>(s.alpha[static_cast<std::size_t>(k)]) - a) < 1e-12L);
            CHECK(std::abs(static_cast<long double>(s.sigma[static_cast<std::size_t>(k)]) - sig) < 1e-12L);
        }
    }
    CHECK(s.sigma[1] == 0.0);
    CHECK_THROWS_AS(cosine_schedule(0), Error);
}

TEST_CASE("int2bit and bit2int") {
    SUBCASE("examples") {
        const std::vector<int> t0{0};
        const Matrix z = int2bit(t0, 8);
        for (int i = 0; i < 8; ++i) CHECK(z(0, i) == -1.0);
        const std::vector<int> t5{5};
        const Matrix f = int2bit(t5, 8);
        const double expect[8] = {-1, -1, -1, -1, -1, 1, -1, 1};
        for (int i = 0; i < 8; ++i) CHECK(f(0, i) == expect[i]);
        Matrix ones = Matrix::Constant(1, 8, 1.0);
        CHECK(bit2int(ones).front() == 255);
        Matrix mixed(1, 8);
        mixed << 0.3, -0.2, 0.0, -1e-12, 5.0, -5.0, 1e-300, -0.7;
        CHECK(bit2int(mixed).front() == 0b10101010);
    }
    SUBCASE("out of range") {
        const std::vector<int> bad{256};
        CHECK_THROWS_AS(int2bit(bad, 8), Error);
        const std::vector<int> neg{-1};
        CHECK_THROWS_AS(int2bit(neg, 8), Error);
    }
    SUBCASE("round trip for all tokens and lengths up to 6") {
        Rng rng(1);
        std::uniform_int_distribution<int> tok(0, 255);
        for (int len = 1; len <= 6; ++len) {
            for (int rep = 0; rep < 256; ++rep) {
                std::vector<int> seq(static_cast<std::size_t>(len));
                seq[0] = rep;
                for (int i = 1; i < len; ++i) seq[static_cast<std::size_t>(i)] = tok(rng);
                CHECK(bit2int(int2bit(seq, 8)) == seq);
            }
        }
    }
    SUBCASE("noisy bits at std 0.3 decode with under 1% token errors") {
        Rng rng(77);
        std::uniform_int_distribution<int> tok(0, 255);
        std::normal_distribution<double> n(0.0, 0.3);
        int errors = 0;
        constexpr int kTrials = 100000;
        for (int t = 0; t < kTrials; ++t) {
            const std::vector<int> v{tok(rng)};
            Matrix b = int2bit(v, 8);
            for (int i = 0; i < 8; ++i) b(0, i) += n(rng);
            errors += bit2int(b).front() != v.front() ? 1 : 0;
        }
        CHECK(static_cast<double>(errors) / kTrials < 0.01);
    }
}

TEST_CASE("forward noise marginal") {
    const NoiseSchedule s = cosine_schedule(10);
    Rng rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    constexpr int kDraws = 10000;
    const std::vector<int> tokens{173};
    const Matrix clean = int2bit(tokens, 8);
    for (int k = 1; k <= 10; ++k) {
        Matrix c(kDraws, 8), e(kDraws, 8);
        for (int r = 0; r < kDraws; ++r) {
            c.row(r) = clean.row(0);
            for (int i = 0; i < 8; ++i) e(r, i) = n(rng);
        }
        const std::vector<int> steps(kDraws, k);
        const Matrix a = noisy_bits(s, c, steps, e);
        const double ab = s.alpha_bar[static_cast<std::size_t>(k)];
        // Spread of A_k around its mean sqrt(ab) A_0.
        const Matrix dev = a - std::sqrt(ab) * c;
        const double sd = std::sqrt(dev.array().square().mean());
        CHECK(std::abs(sd - std::sqrt(1.0 - ab)) <= 0.03 * std::sqrt(1.0 - ab));
    }
}

TEST_CASE("denoising loss") {
    const DenoiserConfig c = tiny_config();
    Denoiser model(c, 3);
    const NoiseSchedule s = cosine_schedule(10);
    const Matrix cond = random_matrix(2, c.condition_dim, 1);
    const std::vector<int> tokens{1, 6, 3, 7, 0, 2};
    Matrix clean(2, c.bits_dim());
    const Matrix bits = int2bit(tokens, c.bits);
    for (int i = 0; i < clean.size(); ++i) clean.data()[i] = bits.data()[i];

    SUBCASE("an exact noise predictor has zero loss") {
        // The zero network predicts zero noise exactly.
        for (nn::Parameter* p : model.parameters()) p->value.setZero();
        const std::vector<int> steps{3, 9};
        const Matrix zero = Matrix::Zero(2, c.bits_dim());
        nn::Tape tape;
        CHECK(tape.value(denoising_loss(tape, model, s, cond, clean, steps, zero))(0, 0) == 0.0);
        const Matrix eps = random_matrix(2, c.bits_dim(), 4);
        nn::Tape t2;
        const double l = t2.value(denoising_loss(t2, model, s, cond, clean, steps, eps))(0, 0);
        CHECK(l == doctest::Approx(eps.rowwise().squaredNorm().mean()).epsilon(1e-12));
    }
    SUBCASE("at alpha_bar near 1 the input is nearly clean") {
        const NoiseSchedule fine = cosine_schedule(1000);
        const std::vector<int> steps{1, 1};
        const Matrix eps = random_matrix(2, c.bits_dim(), 8);
        const Matrix a = noisy_bits(fine, clean, steps, eps);
        CHECK((a - clean).cwiseAbs().maxCoeff() < 0.05);
    }
    SUBCASE("gradients agree with finite differences on 2-sample batches") {
        for (std::uint64_t inst = 0; inst < 5; ++inst) {
            CAPTURE(inst);
            Denoiser m(c, 10 + inst);
            const std::vector<int> steps{static_cast<int>(1 + inst), static_cast<int>(10 - inst)};
            const Matrix eps = random_matrix(2, c.bits_dim(), 20 + inst);
            const Matrix co = random_matrix(2, c.condition_dim, 30 + inst);
            auto params = m.parameters();
            auto loss = [&] {
                nn::Tape t;
                return t.value(denoising_loss(t, m, s, co, clean, steps, eps))(0, 0);
            };
            auto analytic = [&] {
                nn::zero_grads(params);
                nn::Tape t;
                t.backward(denoising_loss(t, m, s, co, clean, steps, eps));
            };
            const auto r = nn::finite_difference_check(loss, analytic, params, 1e-5, 8, inst);
            CHECK(r.max_relative_error < 1e-3);
        }
    }
}

TEST_CASE("posterior mean") {
    const NoiseSchedule s = cosine_schedule(10);
    SUBCASE("equals the noise-form mean when the clean estimate is inside [-1, 1]") {
        for (int k = 1; k <= 9; ++k) {
            const double ab = s.alpha_bar[static_cast<std::size_t>(k)];
            // Choose eps so the clean estimate is a known interior point.
            const Matrix x0 = random_matrix(3, 5, 100 + k, 0.3).cwiseMax(-0.9).cwiseMin(0.9);
            const Matrix e = random_matrix(3, 5, 200 + k);
            const Matrix a = std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * e;
            const Matrix m = posterior_mean(s, k, a, e);
            const double al = s.alpha[static_cast<std::size_t>(k)];
            for (Eigen::Index i = 0; i < a.size(); ++i) {
                const double expect =
                    (a.data()[i] - (1.0 - al) / std::sqrt(1.0 - ab) * e.data()[i]) / std::sqrt(al);
                CHECK(m.data()[i] == doctest::Approx(expect).epsilon(1e-10));
            }
        }
    }
    SUBCASE("clipped clean estimate") {
        for (int k = 1; k <= 10; ++k) {
            const Matrix a = random_matrix(2, 4, 300 + k);
            const Matrix e = random_matrix(2, 4, 400 + k);
            const auto i = static_cast<std::size_t>(k);
            const long double ab = s.alpha_bar[i], abp = s.alpha_bar[i - 1], al = s.alpha[i];
            const Matrix m = posterior_mean(s, k, a, e);
            for (Eigen::Index j = 0; j < a.size(); ++j) {
                long double x0 = (a.data()[j] - std::sqrt(1.0L - ab) * e.data()[j]) / std::sqrt(ab);
                x0 = std::clamp(x0, -1.0L, 1.0L);
                const long double expect = std::sqrt(abp) * (1.0L - al) / (1.0L - ab) * x0 +
                                           std::sqrt(al) * (1.0L - abp) / (1.0L - ab) * a.data()[j];
                CHECK(std::abs(m.data()[j] - static_cast<double>(expect)) < 1e-12);
            }
        }
    }
    SUBCASE("finite at the last step") {
        const Matrix a = random_matrix(4, 8, 5);
        const Matrix e = a + random_matrix(4, 8, 6, 0.1);
        CHECK(posterior_mean(s, 10, a, e).allFinite());
        CHECK(posterior_mean(s, 10, a, e).cwiseAbs().maxCoeff() <= 1.0);
    }
}

TEST_CASE("soft feasibility") {
    const auto table = random_table(8, 4);
    SUBCASE("matches an enumeration oracle") {
        for (std::uint64_t inst = 0; inst < 10; ++inst) {
            const Matrix b = random_matrix(4, 3, inst, 0.7);
            CHECK(soft_feasibility(b, table, 4.0) == doctest::Approx(soft_oracle(b, table, 4.0)).epsilon(1e-12));
        }
    }
    SUBCASE("hard-bit limit") {
        const std::vector<int> seq{3, 5, 0, 7};
        const Matrix b = int2bit(seq, 3);
        const double expect = (table.soft(3, 5) + table.soft(5, 0) + table.soft(0, 7)) / 3.0;
        CHECK(soft_feasibility(b, table, 200.0) == doctest::Approx(expect).epsilon(1e-9));
    }
    SUBCASE("log-feasibility gradient agrees with central differences") {
        for (std::uint64_t inst = 0; inst < 6; ++inst) {
            CAPTURE(inst);
            Matrix b = random_matrix(6, 3, 50 + inst, 0.8);
            Matrix g;
            const double p = soft_feasibility(b, table, 4.0, &g);
            constexpr double h = 1e-6;
            for (Eigen::Index i = 0; i < b.size(); ++i) {
                const double keep = b.data()[i];
                b.data()[i] = keep + h;
                const double up = std::log(soft_feasibility(b, table, 4.0));
                b.data()[i] = keep - h;
                const double dn = std::log(soft_feasibility(b, table, 4.0));
                b.data()[i] = keep;
                const double numeric = (up - dn) / (2.0 * h);
                CHECK(nn::relative_error(g.data()[i] / p, numeric) < 1e-3);
            }
        }
    }
    SUBCASE("errors") {
        const Matrix one = random_matrix(1, 3, 1);
        CHECK_THROWS_AS(soft_feasibility(one, table, 4.0), Error);
        const Matrix wide = random_matrix(3, 4, 1);
        CHECK_THROWS_AS(soft_feasibility(wide, table, 4.0), Error);
    }
}

TEST_CASE("sampling") {
    const DenoiserConfig c = tiny_config();
    const Denoiser model(c, 9);
    const NoiseSchedule s = cosine_schedule(10);
    const auto table = random_table(8, 2);
    const std::vector<double> cond{0.1, -0.4, 0.3, 1.0};

    SUBCASE("deterministic under a seed, tau tokens in range") {
        const auto a = sample_unguided(model, s, cond, 42);
        const auto b = sample_unguided(model, s, cond, 42);
        CHECK(a == b);
        CHECK(a.size() == static_cast<std::size_t>(c.tokens));
        for (int t : a) {
            CHECK(t >= 0);
            CHECK(t < 8);
        }
    }
    SUBCASE("each sample owns its stream") {
        const auto five = sample(model, s, cond, 5, 17);
        const auto three = sample(model, s, cond, 3, 17);
        for (std::size_t i = 0; i < 3; ++i) CHECK(five[i] == three[i]);
        CHECK(five.front() == sample_unguided(model, s, cond, 17));
    }
    SUBCASE("zero guidance reproduces unguided samples bitwise on 50 conditions") {
        for (int k = 0; k < 50; ++k) {
            const Matrix cm = random_matrix(1, c.condition_dim, 1000 + k);
            const std::vector<double> ck(cm.data(), cm.data() + cm.size());
            const auto u = sample(model, s, ck, 4, 5 + k);
            Guidance g;
            g.table = &table;
            g.scale = 0.0;
            CHECK(sample(model, s, ck, 4, 5 + k, g) == u);
            CHECK(sample_guided(model, s, ck, table, 0.0, 5 + k) == sample_unguided(model, s, ck, 5 + k));
        }
    }
    SUBCASE("guided sampling needs a table and a valid scale") {
        Guidance g;
        g.scale = 1.0;
        CHECK_THROWS_AS(sample(model, s, cond, 2, 1, g), Error);
        g.table = &table;
        g.scale = -1.0;
        CHECK_THROWS_AS(sample(model, s, cond, 2, 1, g), Error);
        const std::vector<double> short_cond{1.0};
        CHECK_THROWS_AS(sample_unguided(model, s, short_cond, 1), Error);
    }
}

TEST_CASE("a small guided step raises soft feasibility") {
    // Frozen draw z: the proposal mu + sigma z gives the gradient, and the
    // guided and unguided samples share z.
    const auto table = random_table(8, 21);
    const NoiseSchedule s = cosine_schedule(10);
    Rng rng(12);
    std::normal_distribution<double> n(0.0, 1.0);
    int improved = 0;
    constexpr int kCases = 100;
    for (int t = 0; t < kCases; ++t) {
        const int k = 2 + t % 9;
        const double sigma = s.sigma[static_cast<std::size_t>(k)];
        Matrix mu(3, 3), z(3, 3);
        for (Eigen::Index i = 0; i < mu.size(); ++i) mu.data()[i] = 0.8 * n(rng);
        for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng);
        const Matrix proposal = mu + sigma * z;
        Matrix g;
        const double p = soft_feasibility(proposal, table, 4.0, &g);
        const Matrix guided = mu + 0.1 * sigma * sigma * g / p + sigma * z;
        improved += soft_feasibility(guided, table, 4.0) > p ? 1 : 0;
    }
    CHECK(improved >= 90);
}

TEST_CASE("a denoiser trained on one sequence reproduces it") {
    DenoiserConfig c = tiny_config();
    c.hidden_dims = {64, 64};
    Denoiser model(c, 1);
    const NoiseSchedule s = cosine_schedule(10);
    const std::vector<int> target{5, 2, 7};
    const Matrix tb = int2bit(target, c.bits);
    constexpr int kRows = 64;
    Matrix cond(kRows, c.condition_dim), clean(kRows, c.bits_dim());
    const Matrix cr = random_matrix(1, c.condition_dim, 3);
    for (int r = 0; r < kRows; ++r) {
        cond.row(r) = cr.row(0);
        for (int i = 0; i < c.bits_dim(); ++i) clean(r, i) = tb.data()[i];
    }
    nn::AdamW opt(nn::AdamWConfig{3e-3}, model.parameters());
    Rng rng(8);
    for (int it = 0; it < 600; ++it) train_step(model, opt, s, cond, clean, rng);
    const std::vector<double> cv(cr.data(), cr.data() + cr.size());
    const auto samples = sample(model, s, cv, 200, 99);
    int hits = 0;
    for (const auto& seq : samples) hits += seq == target ? 1 : 0;
    CHECK(hits >= 190);
}

TEST_CASE("denoiser checkpoint round trip") {
    const DenoiserConfig c = tiny_config();
    Denoiser model(c, 6);
    model.set_trained_epochs(4);
    const auto path = std::filesystem::temp_directory_path() / "rdiff_test_denoiser.ckpt";
    model.save(path);
    const Denoiser back = Denoiser::load(path);
    std::filesystem::remove(path);
    CHECK(back.trained_epochs() == 4);
    const Matrix cond = random_matrix(3, c.condition_dim, 1);
    const Matrix bits = random_matrix(3, c.bits_dim(), 2);
    const std::vector<int> steps{1, 5, 10};
    CHECK(back.predict(cond, bits, steps) == model.predict(cond, bits, steps));
    const std::vector<double> cv(cond.data(), cond.data() + c.condition_dim);
    CHECK(sample_unguided(back, cosine_schedule(10), cv, 3) == sample_unguided(model, cosine_schedule(10), cv, 3));
}
