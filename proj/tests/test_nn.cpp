#include "doctest.h"

#include <filesystem>
#include <sstream>

#include "rdiff/nn.hpp"

using namespace rdiff;
using namespace rdiff::nn;

namespace {

Matrix row(std::initializer_list<double> v) {
    Matrix m(1, static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) m(0, i++) = x;
    return m;
}

}  // namespace

TEST_CASE("forward_mlp: zero weights give zero output") {
    Mlp net(MlpConfig{3, 2, {4}, Activation::relu}, "z", 1);
    for (Parameter* p : net.parameters()) p->value.setZero();
    const Matrix out = net.forward(row({1.0, -2.0, 3.0}));
    CHECK(out.rows() == 1);
    CHECK(out.cols() == 2);
    CHECK(out.isZero(0.0));
}

TEST_CASE("forward_mlp: identity layers pass input through") {
    // Two identity layers with relu in between, on a non-negative input.
    Mlp net(MlpConfig{2, 2, {2}, Activation::relu}, "id", 1);
    auto ps = net.parameters();
    ps[0]->value = Matrix::Identity(2, 2);
    ps[1]->value.setZero();
    ps[2]->value = Matrix::Identity(2, 2);
    ps[3]->value.setZero();
    const Matrix out = net.forward(row({1.0, 2.0}));
    CHECK(out(0, 0) == 1.0);
    CHECK(out(0, 1) == 2.0);
}

TEST_CASE("forward_mlp: 2-4-2 relu matches a hand-evaluated trace") {
    Mlp net(MlpConfig{2, 2, {4}, Activation::relu}, "h", 42);
    auto ps = net.parameters();
    for (Parameter* p : ps) {
        // non-zero biases too
        if (p->value.rows() == 1) p->value.setConstant(0.1);
    }
    const double in[2] = {0.7, -1.3};
    // hand evaluation with scalar loops
    double hidden[4];
    for (int j = 0; j < 4; ++j) {
        double s = ps[1]->value(0, j);
        for (int i = 0; i < 2; ++i) s += in[i] * ps[0]->value(i, j);
        hidden[j] = s > 0.0 ? s : 0.0;
    }
    double expect[2];
    for (int j = 0; j < 2; ++j) {
        double s = ps[3]->value(0, j);
        for (int i = 0; i < 4; ++i) s += hidden[i] * ps[2]->value(i, j);
        expect[j] = s;
    }
    const Matrix out = net.forward(row({in[0], in[1]}));
    CHECK(out(0, 0) == doctest::Approx(expect[0]).epsilon(1e-14));
    CHECK(out(0, 1) == doctest::Approx(expect[1]).epsilon(1e-14));

    Tape tape;
    Var y = net.forward(tape, tape.constant(row({in[0], in[1]})));
    CHECK(tape.value(y)(0, 0) == out(0, 0));
}

TEST_CASE("forward_mlp: dimension mismatch names the layer") {
    Mlp net(MlpConfig{3, 1, {2}, Activation::relu}, "encoder", 1);
    try {
        net.forward(row({1.0, 2.0}));
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::dimension);
        CHECK(std::string(e.what()).find("encoder.0.weight") != std::string::npos);
    }
}

TEST_CASE("backward: linear gradient") {
    Parameter w("w", row({0.5, -1.0, 2.0}));
    const Matrix x = row({3.0, 4.0, -5.0});
    Tape tape;
    // loss = sum(w . x) via a 1x3 * 3x1 product
    Var loss = tape.matmul(tape.param(w), tape.constant(x.transpose()));
    tape.backward(loss);
    CHECK(w.grad(0, 0) == 3.0);
    CHECK(w.grad(0, 1) == 4.0);
    CHECK(w.grad(0, 2) == -5.0);
}

TEST_CASE("backward: zero at the minimum of squared error") {
    Mlp net(MlpConfig{2, 2, {3}, Activation::tanh}, "m", 3);
    const Matrix x = row({0.2, 0.4});
    const Matrix t = net.forward(x);
    Tape tape;
    Var y = net.forward(tape, tape.constant(x));
    Var loss = tape.mean_row_sq_norm(tape.sub(y, tape.constant(t)));
    tape.backward(loss);
    for (const Parameter* p : net.parameters()) CHECK(p->grad.isZero(0.0));
}

TEST_CASE("backward: errors before forward and on non-scalar roots") {
    Tape empty;
    CHECK_THROWS_AS(empty.backward(Var{0}), Error);
    Tape tape;
    Var v = tape.constant(Matrix::Ones(2, 2));
    CHECK_THROWS_AS(tape.backward(v), Error);
    CHECK_THROWS_AS(tape.grad(v), Error);
}

TEST_CASE("backward: random MLPs agree with central finite differences") {
    for (auto act : {Activation::relu, Activation::gelu, Activation::tanh}) {
        Mlp net(MlpConfig{5, 3, {8, 6}, act}, "fd", 11);
        Rng rng(5);
        std::normal_distribution<double> n(0.0, 1.0);
        Matrix x(4, 5), t(4, 3);
        for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
        auto loss = [&] {
            const Matrix y = net.forward(x);
            return (y - t).squaredNorm() / 4.0;
        };
        auto analytic = [&] {
            Tape tape;
            Var y = net.forward(tape, tape.constant(x));
            tape.backward(tape.mean_row_sq_norm(tape.sub(y, tape.constant(t))));
        };
        auto params = net.parameters();
        const GradCheckResult r = finite_difference_check(loss, analytic, params, 1e-5, 50, 9);
        INFO(to_string(act) << " worst: " << r.worst);
        CHECK(r.max_relative_error < 1e-3);
        CHECK(r.checked > 50);
    }
}

TEST_CASE("tape ops: concat, gather, straight-through, scale") {
    Parameter table("table", Matrix::Zero(3, 2));
    table.value << 1, 2, 3, 4, 5, 6;
    Parameter a("a", row({1.0, -1.0}));
    Tape tape;
    Var g = tape.gather_rows(tape.param(table), {2, 0, 2});
    CHECK(tape.value(g)(0, 0) == 5.0);
    Var st = tape.straight_through(tape.param(a), row({10.0, 20.0}));
    CHECK(tape.value(st)(0, 1) == 20.0);
    Var c = tape.concat_cols(tape.scale(st, 2.0), tape.constant(row({7.0})));
    CHECK(tape.value(c).cols() == 3);
    Var loss = tape.add(tape.mean_row_sq_norm(g), tape.mean_row_sq_norm(c));
    tape.backward(loss);
    // d/d table row 2: two gathers, each 2*row/3
    CHECK(table.grad(2, 0) == doctest::Approx(2.0 * 2.0 * 5.0 / 3.0));
    CHECK(table.grad(1, 0) == 0.0);
    // straight-through: d/da = 2 * (2 * st_value) * 2
    CHECK(a.grad(0, 0) == doctest::Approx(2.0 * 20.0 * 2.0));
}

TEST_CASE("adamw_step") {
    SUBCASE("zero gradient, no decay: unchanged") {
        Parameter p("p", row({1.0, -2.0}));
        AdamW opt(AdamWConfig{0.1, 0.9, 0.999, 0.0, 1e-8}, {&p});
        opt.step();
        CHECK(p.value(0, 0) == 1.0);
        CHECK(p.value(0, 1) == -2.0);
    }
    SUBCASE("first step moves by about lr times the sign") {
        Parameter p("p", row({1.0}));
        p.grad(0, 0) = 1.0;
        AdamW opt(AdamWConfig{0.1, 0.9, 0.999, 0.0, 1e-8}, {&p});
        opt.step(1);
        // m_hat = 1, v_hat = 1 -> p = 1 - 0.1 / (1 + 1e-8)
        CHECK(p.value(0, 0) == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
    }
    SUBCASE("decoupled decay shrinks magnitude") {
        Parameter p("p", row({2.0, -3.0}));
        AdamW opt(AdamWConfig{0.1, 0.9, 0.999, 0.5, 1e-8}, {&p});
        opt.step();
        CHECK(std::abs(p.value(0, 0)) < 2.0);
        CHECK(std::abs(p.value(0, 1)) < 3.0);
    }
    SUBCASE("non-finite gradient names the parameter") {
        Parameter p("decoder.1.bias", row({0.0}));
        p.grad(0, 0) = std::nan("");
        AdamW opt(AdamWConfig{}, {&p});
        try {
            opt.step();
            FAIL("expected error");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("decoder.1.bias") != std::string::npos);
        }
        CHECK_THROWS_AS(opt.step(0), Error);
    }
}

TEST_CASE("training is bitwise deterministic") {
    auto train = [] {
        Mlp net(MlpConfig{3, 2, {8}, Activation::gelu}, "d", 77);
        AdamW opt(AdamWConfig{1e-2}, net.parameters());
        Rng rng(3);
        std::normal_distribution<double> n(0.0, 1.0);
        for (int s = 0; s < 20; ++s) {
            Matrix x(8, 3), t(8, 2);
            for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
            for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
            auto ps = net.parameters();
            zero_grads(ps);
            Tape tape;
            Var y = net.forward(tape, tape.constant(x));
            tape.backward(tape.mean_row_sq_norm(tape.sub(y, tape.constant(t))));
            opt.step();
        }
        std::vector<double> flat;
        for (const Parameter* p : std::as_const(net).parameters()) {
            flat.insert(flat.end(), p->value.data(), p->value.data() + p->value.size());
            CHECK(p->value.allFinite());
        }
        return flat;
    };
    CHECK(train() == train());
}

TEST_CASE("checkpoint round trip is bit exact") {
    Mlp net(MlpConfig{4, 3, {5}, Activation::relu}, "ck", 5);
    Checkpoint ck;
    for (const Parameter* p : std::as_const(net).parameters()) ck.add(*p);
    ck.add_scalar("train.step", 17.0);
    std::stringstream buf;
    ck.write(buf);
    const std::string bytes = buf.str();
    CHECK(bytes.substr(0, 4) == "RDNN");

    std::stringstream in(bytes);
    const Checkpoint back = Checkpoint::read(in);
    std::stringstream again;
    back.write(again);
    CHECK(again.str() == bytes);
    CHECK(back.scalar("train.step") == 17.0);

    Mlp other(MlpConfig{4, 3, {5}, Activation::relu}, "ck", 999);
    for (Parameter* p : other.parameters()) back.load_into(*p);
    const Matrix x = Matrix::Constant(2, 4, 0.3);
    CHECK(other.forward(x) == net.forward(x));

    std::stringstream bad("RDNX");
    CHECK_THROWS_AS(Checkpoint::read(bad), Error);
    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(Checkpoint::read(truncated), Error);
}
