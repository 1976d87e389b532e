#include "rdiff/nn.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "rdiff/binio.hpp"

namespace rdiff::nn {
namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

Matrix apply_activation(const Matrix& x, Activation a) {
    switch (a) {
        case Activation::relu:
            return x.cwiseMax(0.0);
        case Activation::gelu:
            return x.unaryExpr([](double v) { return gelu(v); });
        case Activation::tanh:
            return x.array().tanh().matrix();
    }
    return x;
}

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Parameter::Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
    grad = Matrix::Zero(value.rows(), value.cols());
}

bool Parameter::all_finite() const {
    return value.allFinite() && grad.allFinite();
}

Activation parse_activation(std::string_view name) {
    if (name == "relu") return Activation::relu;
    if (name == "gelu") return Activation::gelu;
    if (name == "tanh") return Activation::tanh;
    fail(ErrorKind::validation, "unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::gelu: return "gelu";
        case Activation::tanh: return "tanh";
    }
    return "?";
}

void MlpConfig::validate() const {
    if (input_dim <= 0 || output_dim <= 0) {
        fail(ErrorKind::validation, "mlp dims must be positive");
    }
    if (hidden_dims.empty()) {
        fail(ErrorKind::validation, "mlp needs at least one hidden layer");
    }
    for (int h : hidden_dims) {
        if (h <= 0) {
            fail(ErrorKind::validation, "mlp hidden dims must be positive");
        }
    }
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(Node node) {
    if (backward_done_) {
        fail(ErrorKind::state, "tape already consumed by backward(); call clear()");
    }
    nodes_.push_back(std::move(node));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
        fail(ErrorKind::state, "variable does not belong to this tape");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::constant(Matrix value) {
    Node n;
    n.op = Op::constant;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::param(Parameter& p) {
    Node n;
    n.op = Op::param;
    n.value = p.value;
    n.param = &p;
    return push(std::move(n));
}

Var Tape::matmul(Var x, Var w) {
    const Matrix& xv = node(x).value;
    const Matrix& wv = node(w).value;
    if (xv.cols() != wv.rows()) {
        fail(ErrorKind::dimension, "matmul shape mismatch " + shape_str(xv) + " * " + shape_str(wv));
    }
    Node n;
    n.op = Op::matmul;
    n.a = x.id;
    n.b = w.id;
    n.value.noalias() = xv * wv;
    return push(std::move(n));
}

Var Tape::add_bias(Var x, Var bias) {
    const Matrix& xv = node(x).value;
    const Matrix& bv = node(bias).value;
    if (bv.rows() != 1 || bv.cols() != xv.cols()) {
        fail(ErrorKind::dimension, "bias shape " + shape_str(bv) + " does not fit " + shape_str(xv));
    }
    Node n;
    n.op = Op::add_bias;
    n.a = x.id;
    n.b = bias.id;
    n.value = xv.rowwise() + bv.row(0);
    return push(std::move(n));
}

Var Tape::activate(Var x, Activation a) {
    Node n;
    n.op = Op::activate;
    n.a = x.id;
    n.act = a;
    n.value = apply_activation(node(x).value, a);
    return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
    const Matrix& av = node(a).value;
    const Matrix& bv = node(b).value;
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
        fail(ErrorKind::dimension, "add shape mismatch " + shape_str(av) + " + " + shape_str(bv));
    }
    Node n;
    n.op = Op::add;
    n.a = a.id;
    n.b = b.id;
    n.value = av + bv;
    return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
    const Matrix& av = node(a).value;
    const Matrix& bv = node(b).value;
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
        fail(ErrorKind::dimension, "sub shape mismatch " + shape_str(av) + " - " + shape_str(bv));
    }
    Node n;
    n.op = Op::sub;
    n.a = a.id;
    n.b = b.id;
    n.value = av - bv;
    return push(std::move(n));
}

Var Tape::scale(Var a, double s) {
    Node n;
    n.op = Op::scale;
    n.a = a.id;
    n.scalar = s;
    n.value = node(a).value * s;
    return push(std::move(n));
}

Var Tape::concat_cols(Var a, Var b) {
    const Matrix& av = node(a).value;
    const Matrix& bv = node(b).value;
    if (av.rows() != bv.rows()) {
        fail(ErrorKind::dimension, "concat row mismatch " + shape_str(av) + " | " + shape_str(bv));
    }
    Node n;
    n.op = Op::concat;
    n.a = a.id;
    n.b = b.id;
    n.value.resize(av.rows(), av.cols() + bv.cols());
    n.value << av, bv;
    return push(std::move(n));
}

Var Tape::gather_rows(Var table, std::vector<int> rows) {
    const Matrix& tv = node(table).value;
    Node n;
    n.op = Op::gather;
    n.a = table.id;
    n.value.resize(static_cast<Eigen::Index>(rows.size()), tv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= tv.rows()) {
            fail(ErrorKind::dimension, "gather index out of range");
        }
        n.value.row(static_cast<Eigen::Index>(i)) = tv.row(rows[i]);
    }
    n.rows = std::move(rows);
    return push(std::move(n));
}

Var Tape::straight_through(Var x, const Matrix& forward_value) {
    const Matrix& xv = node(x).value;
    if (xv.rows() != forward_value.rows() || xv.cols() != forward_value.cols()) {
        fail(ErrorKind::dimension, "straight-through shape mismatch");
    }
    Node n;
    n.op = Op::straight_through;
    n.a = x.id;
    n.value = forward_value;
    return push(std::move(n));
}

Var Tape::mean_row_sq_norm(Var x) {
    const Matrix& xv = node(x).value;
    Node n;
    n.op = Op::mean_row_sq_norm;
    n.a = x.id;
    n.value = Matrix::Constant(1, 1, xv.squaredNorm() / static_cast<double>(std::max<Eigen::Index>(1, xv.rows())));
    return push(std::move(n));
}

const Matrix& Tape::value(Var v) const { return node(v).value; }

const Matrix& Tape::grad(Var v) const {
    const Node& n = node(v);
    if (!backward_done_) {
        fail(ErrorKind::state, "gradients requested before backward()");
    }
    return n.grad;
}

void Tape::backward(Var loss) {
    if (nodes_.empty()) {
        fail(ErrorKind::state, "backward() called before any forward computation");
    }
    if (backward_done_) {
        fail(ErrorKind::state, "backward() already ran on this tape");
    }
    const Node& root = node(loss);
    if (root.value.rows() != 1 || root.value.cols() != 1) {
        fail(ErrorKind::state, "backward() needs a scalar loss, got " + shape_str(root.value));
    }
    for (auto& n : nodes_) {
        n.grad.setZero(n.value.rows(), n.value.cols());
    }
    nodes_[static_cast<std::size_t>(loss.id)].grad(0, 0) = 1.0;

    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        const Matrix& g = n.grad;
        switch (n.op) {
            case Op::constant:
                break;
            case Op::param:
                n.param->grad += g;
                break;
            case Op::matmul: {
                Node& x = nodes_[static_cast<std::size_t>(n.a)];
                Node& w = nodes_[static_cast<std::size_t>(n.b)];
                x.grad.noalias() += g * w.value.transpose();
                w.grad.noalias() += x.value.transpose() * g;
                break;
            }
            case Op::add_bias: {
                nodes_[static_cast<std::size_t>(n.a)].grad += g;
                nodes_[static_cast<std::size_t>(n.b)].grad += g.colwise().sum();
                break;
            }
            case Op::activate: {
                Node& x = nodes_[static_cast<std::size_t>(n.a)];
                switch (n.act) {
                    case Activation::relu:
                        x.grad.array() += g.array() * (x.value.array() > 0.0).cast<double>();
                        break;
                    case Activation::gelu:
                        x.grad.array() += g.array() * x.value.unaryExpr([](double v) { return gelu_grad(v); }).array();
                        break;
                    case Activation::tanh:
                        x.grad.array() += g.array() * (1.0 - n.value.array().square());
                        break;
                }
                break;
            }
            case Op::add:
                nodes_[static_cast<std::size_t>(n.a)].grad += g;
                nodes_[static_cast<std::size_t>(n.b)].grad += g;
                break;
            case Op::sub:
                nodes_[static_cast<std::size_t>(n.a)].grad += g;
                nodes_[static_cast<std::size_t>(n.b)].grad -= g;
                break;
            case Op::scale:
                nodes_[static_cast<std::size_t>(n.a)].grad += n.scalar * g;
                break;
            case Op::concat: {
                Node& a = nodes_[static_cast<std::size_t>(n.a)];
                Node& b = nodes_[static_cast<std::size_t>(n.b)];
                a.grad += g.leftCols(a.value.cols());
                b.grad += g.rightCols(b.value.cols());
                break;
            }
            case Op::gather: {
                Node& t = nodes_[static_cast<std::size_t>(n.a)];
                for (std::size_t r = 0; r < n.rows.size(); ++r) {
                    t.grad.row(n.rows[r]) += g.row(static_cast<Eigen::Index>(r));
                }
                break;
            }
            case Op::straight_through:
                nodes_[static_cast<std::size_t>(n.a)].grad += g;
                break;
            case Op::mean_row_sq_norm: {
                Node& x = nodes_[static_cast<std::size_t>(n.a)];
                const double rows = static_cast<double>(std::max<Eigen::Index>(1, x.value.rows()));
                x.grad += (2.0 * g(0, 0) / rows) * x.value;
                break;
            }
        }
    }
    backward_done_ = true;
}

void Tape::clear() {
    nodes_.clear();
    backward_done_ = false;
}

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(MlpConfig config, std::string name, std::uint64_t seed)
    : config_(std::move(config)), name_(std::move(name)) {
    config_.validate();
    Rng rng(seed);
    std::vector<int> dims;
    dims.push_back(config_.input_dim);
    dims.insert(dims.end(), config_.hidden_dims.begin(), config_.hidden_dims.end());
    dims.push_back(config_.output_dim);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const int fan_in = dims[l];
        std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        Matrix w(fan_in, dims[l + 1]);
        for (Eigen::Index i = 0; i < w.size(); ++i) {
            w.data()[i] = normal(rng);
        }
        weights_.emplace_back(name_ + "." + std::to_string(l) + ".weight", std::move(w));
        biases_.emplace_back(name_ + "." + std::to_string(l) + ".bias", Matrix::Zero(1, dims[l + 1]));
    }
}

void Mlp::check_input(Eigen::Index cols) const {
    if (weights_.empty()) {
        fail(ErrorKind::state, "mlp '" + name_ + "' is not initialized");
    }
    if (cols != config_.input_dim) {
        fail(ErrorKind::dimension, "layer '" + weights_.front().name + "' expects " +
                                       std::to_string(config_.input_dim) + " inputs, got " + std::to_string(cols));
    }
}

Matrix Mlp::forward(const Matrix& input) const {
    check_input(input.cols());
    Matrix h = input;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        Matrix z(h.rows(), weights_[l].value.cols());
        z.noalias() = h * weights_[l].value;
        z.rowwise() += biases_[l].value.row(0);
        h = (l + 1 < weights_.size()) ? apply_activation(z, config_.activation) : std::move(z);
    }
    return h;
}

Var Mlp::forward(Tape& tape, Var input) {
    check_input(tape.value(input).cols());
    Var h = input;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        Var w = tape.param(weights_[l]);
        Var b = tape.param(biases_[l]);
        h = tape.add_bias(tape.matmul(h, w), b);
        if (l + 1 < weights_.size()) {
            h = tape.activate(h, config_.activation);
        }
    }
    return h;
}

std::vector<Parameter*> Mlp::parameters() {
    std::vector<Parameter*> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        out.push_back(&weights_[l]);
        out.push_back(&biases_[l]);
    }
    return out;
}

std::vector<const Parameter*> Mlp::parameters() const {
    std::vector<const Parameter*> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        out.push_back(&weights_[l]);
        out.push_back(&biases_[l]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// AdamW

void AdamWConfig::validate() const {
    if (!(learning_rate > 0.0)) fail(ErrorKind::validation, "learning_rate must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0)) fail(ErrorKind::validation, "beta1 must be in (0,1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) fail(ErrorKind::validation, "beta2 must be in (0,1)");
    if (!(weight_decay >= 0.0)) fail(ErrorKind::validation, "weight_decay must be non-negative");
    if (!(epsilon > 0.0)) fail(ErrorKind::validation, "epsilon must be positive");
}

AdamW::AdamW(AdamWConfig config, std::vector<Parameter*> params)
    : config_(config), params_(std::move(params)) {
    config_.validate();
    for (Parameter* p : params_) {
        m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
}

void AdamW::step(std::int64_t step) {
    if (step < 1) {
        fail(ErrorKind::validation, "adamw step must be >= 1");
    }
    for (const Parameter* p : params_) {
        if (!p->grad.allFinite()) {
            fail(ErrorKind::numeric, "non-finite gradient in parameter '" + p->name + "'");
        }
    }
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step));
    const double lr = config_.learning_rate;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = *params_[i];
        if (config_.weight_decay > 0.0) {
            p.value *= (1.0 - lr * config_.weight_decay);
        }
        m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * p.grad;
        v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * p.grad.cwiseProduct(p.grad);
        p.value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.epsilon);
        if (!p.value.allFinite()) {
            fail(ErrorKind::numeric, "parameter '" + p.name + "' became non-finite");
        }
    }
    step_count_ = step;
}

void zero_grads(std::span<Parameter* const> params) {
    for (Parameter* p : params) {
        p->zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Checkpoint

void Checkpoint::add(const Parameter& p) { add(p.name, p.value); }

void Checkpoint::add(std::string name, const Matrix& m) {
    NamedTensor t;
    t.name = std::move(name);
    t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    t.values.assign(m.data(), m.data() + m.size());
    tensors_.push_back(std::move(t));
}

void Checkpoint::add_scalar(std::string name, double value) {
    tensors_.push_back(NamedTensor{std::move(name), {1}, {value}});
}

const NamedTensor* Checkpoint::find(std::string_view name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) {
            return &t;
        }
    }
    return nullptr;
}

const NamedTensor& Checkpoint::require(std::string_view name) const {
    const NamedTensor* t = find(name);
    if (!t) {
        fail(ErrorKind::io, "checkpoint is missing tensor '" + std::string(name) + "'");
    }
    return *t;
}

double Checkpoint::scalar(std::string_view name) const {
    const NamedTensor& t = require(name);
    if (t.values.size() != 1) {
        fail(ErrorKind::io, "tensor '" + std::string(name) + "' is not a scalar");
    }
    return t.values[0];
}

Matrix Checkpoint::matrix(std::string_view name) const {
    const NamedTensor& t = require(name);
    if (t.shape.size() != 2) {
        fail(ErrorKind::io, "tensor '" + std::string(name) + "' is not rank 2");
    }
    Matrix m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
    std::copy(t.values.begin(), t.values.end(), m.data());
    return m;
}

void Checkpoint::load_into(Parameter& p) const {
    Matrix m = matrix(p.name);
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
        fail(ErrorKind::io, "checkpoint tensor '" + p.name + "' has shape " + shape_str(m) +
                                ", expected " + shape_str(p.value));
    }
    p.value = std::move(m);
    p.zero_grad();
}

void Checkpoint::write(std::ostream& out) const {
    binio::write_magic(out, "RDNN");
    binio::write_pod<std::uint32_t>(out, kVersion);
    binio::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensors_.size()));
    for (const auto& t : tensors_) {
        binio::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        binio::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) {
            binio::write_pod<std::uint64_t>(out, d);
        }
        binio::write_f64s(out, t.values);
    }
}

void Checkpoint::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail(ErrorKind::io, "cannot open '" + path.string() + "' for writing");
    }
    write(out);
    if (!out) {
        fail(ErrorKind::io, "write failed for '" + path.string() + "'");
    }
}

Checkpoint Checkpoint::read(std::istream& in) {
    binio::expect_magic(in, "RDNN");
    const auto version = binio::read_pod<std::uint32_t>(in, "version");
    if (version != kVersion) {
        fail(ErrorKind::io, "unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = binio::read_pod<std::uint32_t>(in, "tensor count");
    Checkpoint ckpt;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const auto len = binio::read_pod<std::uint32_t>(in, "name length");
        if (len > (1u << 16)) {
            fail(ErrorKind::io, "implausible tensor name length");
        }
        t.name.resize(len);
        in.read(t.name.data(), len);
        const auto rank = binio::read_pod<std::uint32_t>(in, "rank");
        if (rank > 8) {
            fail(ErrorKind::io, "implausible tensor rank");
        }
        std::uint64_t total = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            t.shape.push_back(binio::read_pod<std::uint64_t>(in, "dim"));
            total *= t.shape.back();
        }
        if (total > (1ull << 32)) {
            fail(ErrorKind::io, "implausible tensor size");
        }
        t.values.resize(total);
        binio::read_f64s(in, t.values, t.name);
        ckpt.tensors_.push_back(std::move(t));
    }
    return ckpt;
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open checkpoint '" + path.string() + "'");
    }
    return read(in);
}

void save_optimizer(Checkpoint& ckpt, const std::string& prefix, AdamW& opt) {
    ckpt.add_scalar(prefix + ".step", static_cast<double>(opt.step_count()));
    for (std::size_t i = 0; i < opt.params().size(); ++i) {
        ckpt.add(prefix + ".m." + opt.params()[i]->name, opt.first_moments()[i]);
        ckpt.add(prefix + ".v." + opt.params()[i]->name, opt.second_moments()[i]);
    }
}

void load_optimizer(const Checkpoint& ckpt, const std::string& prefix, AdamW& opt) {
    opt.set_step_count(static_cast<std::int64_t>(ckpt.scalar(prefix + ".step")));
    for (std::size_t i = 0; i < opt.params().size(); ++i) {
        opt.first_moments()[i] = ckpt.matrix(prefix + ".m." + opt.params()[i]->name);
        opt.second_moments()[i] = ckpt.matrix(prefix + ".v." + opt.params()[i]->name);
    }
}

// ---------------------------------------------------------------------------
// Gradient checking

double relative_error(double analytic, double numeric, double floor) {
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    if (scale < floor) {
        return 0.0;
    }
    return std::abs(analytic - numeric) / scale;
}

GradCheckResult finite_difference_check(const std::function<double()>& loss,
                                        const std::function<void()>& analytic,
                                        std::span<Parameter* const> params,
                                        double h, std::size_t per_param, std::uint64_t seed) {
    zero_grads(params);
    analytic();
    std::vector<Matrix> grads;
    for (Parameter* p : params) {
        grads.push_back(p->grad);
    }
    Rng rng(seed);
    GradCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter& p = *params[pi];
        const auto n = static_cast<std::size_t>(p.value.size());
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(std::min(n, per_param));
        for (std::size_t i : idx) {
            double& slot = p.value.data()[i];
            const double saved = slot;
            slot = saved + h;
            const double up = loss();
            slot = saved - h;
            const double down = loss();
            slot = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = grads[pi].data()[i];
            const double err = relative_error(a, numeric);
            ++result.checked;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                std::ostringstream os;
                os << p.name << "[" << i << "] analytic=" << a << " numeric=" << numeric;
                result.worst = os.str();
            }
        }
    }
    return result;
}

}  // namespace rdiff::nn
