#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rdiff/common.hpp"

// Reverse-mode differentiation over batched row-major matrices. Only the ops
// needed by the MLPs in this project are provided.
namespace rdiff::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    Parameter() = default;
    Parameter(std::string n, Matrix v);

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    bool all_finite() const;
};

enum class Activation { relu, gelu, tanh };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation a);

struct MlpConfig {
    int input_dim = 1;
    int output_dim = 1;
    std::vector<int> hidden_dims;
    Activation activation = Activation::relu;

    void validate() const;
};

struct Var {
    int id = -1;
};

class Tape {
public:
    Var constant(Matrix value);
    Var param(Parameter& p);

    Var matmul(Var x, Var w);
    Var add_bias(Var x, Var bias);
    Var activate(Var x, Activation a);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var scale(Var a, double s);
    Var concat_cols(Var a, Var b);
    // Row lookup into a parameter table; gradients are scatter-added.
    Var gather_rows(Var table, std::vector<int> rows);
    // Forward value is `forward_value`; the gradient flows to x unchanged.
    Var straight_through(Var x, const Matrix& forward_value);
    // Sum of squared entries divided by the number of rows; a 1x1 result.
    Var mean_row_sq_norm(Var x);

    const Matrix& value(Var v) const;
    const Matrix& grad(Var v) const;

    /// Seeds d(loss)/d(loss) = 1 and accumulates into every reachable
    /// Parameter::grad.
    void backward(Var loss);

    void clear();
    std::size_t size() const { return nodes_.size(); }

private:
    enum class Op {
        constant,
        param,
        matmul,
        add_bias,
        activate,
        add,
        sub,
        scale,
        concat,
        gather,
        straight_through,
        mean_row_sq_norm,
    };

    struct Node {
        Op op = Op::constant;
        int a = -1;
        int b = -1;
        Matrix value;
        Matrix grad;
        Parameter* param = nullptr;
        Activation act = Activation::relu;
        double scalar = 0.0;
        std::vector<int> rows;
    };

    Var push(Node node);
    const Node& node(Var v) const;

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

class Mlp {
public:
    Mlp() = default;
    Mlp(MlpConfig config, std::string name, std::uint64_t seed);

    const MlpConfig& config() const { return config_; }
    const std::string& name() const { return name_; }

    /// Inference path without recording; rows are batch entries.
    Matrix forward(const Matrix& input) const;
    Var forward(Tape& tape, Var input);

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;

private:
    void check_input(Eigen::Index cols) const;

    MlpConfig config_;
    std::string name_;
    std::vector<Parameter> weights_;
    std::vector<Parameter> biases_;
};

struct AdamWConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    double epsilon = 1e-8;

    void validate() const;
};

/// AdamW with decoupled weight decay. Moment buffers are owned here and keyed
/// by position in the parameter list given at construction.
class AdamW {
public:
    AdamW() = default;
    AdamW(AdamWConfig config, std::vector<Parameter*> params);

    /// Applies update number `step` (1-based) using the current gradients.
    void step(std::int64_t step);
    /// Convenience: advances the internal counter and applies that step.
    void step() { step(step_count_ + 1); }

    std::int64_t step_count() const { return step_count_; }
    void set_step_count(std::int64_t s) { step_count_ = s; }
    const AdamWConfig& config() const { return config_; }
    void set_learning_rate(double lr) { config_.learning_rate = lr; }

    std::vector<Matrix>& first_moments() { return m_; }
    std::vector<Matrix>& second_moments() { return v_; }
    const std::vector<Parameter*>& params() const { return params_; }

private:
    AdamWConfig config_;
    std::vector<Parameter*> params_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    std::int64_t step_count_ = 0;
};

void zero_grads(std::span<Parameter* const> params);

struct NamedTensor {
    std::string name;
    std::vector<std::uint64_t> shape;
    std::vector<double> values;
};

/// Flat binary parameter store ("RDNN"): magic, u32 version, u32 count, then
/// per tensor u32 name length, name bytes, u32 rank, u64 dims, f64 values.
class Checkpoint {
public:
    static constexpr std::uint32_t kVersion = 1;

    void add(const Parameter& p);
    void add(std::string name, const Matrix& m);
    void add_scalar(std::string name, double value);

    const NamedTensor* find(std::string_view name) const;
    const NamedTensor& require(std::string_view name) const;
    double scalar(std::string_view name) const;
    /// Copies a stored tensor into `p`, checking the shape.
    void load_into(Parameter& p) const;
    Matrix matrix(std::string_view name) const;

    const std::vector<NamedTensor>& tensors() const { return tensors_; }

    void write(std::ostream& out) const;
    void save(const std::filesystem::path& path) const;
    static Checkpoint read(std::istream& in);
    static Checkpoint load(const std::filesystem::path& path);

private:
    std::vector<NamedTensor> tensors_;
};

void save_optimizer(Checkpoint& ckpt, const std::string& prefix, AdamW& opt);
void load_optimizer(const Checkpoint& ckpt, const std::string& prefix, AdamW& opt);

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

/// Compares analytic gradients against central finite differences on a random
/// subset of entries of each parameter. `loss` must be a pure function of the
/// parameter values; `analytic` must leave gradients in Parameter::grad.
GradCheckResult finite_difference_check(const std::function<double()>& loss,
                                        const std::function<void()>& analytic,
                                        std::span<Parameter* const> params,
                                        double h, std::size_t per_param, std::uint64_t seed);

/// Relative error used by all gradient checks: |a - n| / max(|a|, |n|), with
/// pairs whose magnitudes are both below `floor` counted as agreeing.
double relative_error(double analytic, double numeric, double floor = 1e-7);

}  // namespace rdiff::nn
