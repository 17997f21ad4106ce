#pragma once

// Dense float64 tensor math, a reverse-mode tape, and a splittable RNG.
// Small by design: just enough to train the sequence encoder, the
// prediction heads, and the recurrent baselines on a desk machine.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace medseq {

// ---------------------------------------------------------------------
// Error taxonomy shared by all modules.
// ---------------------------------------------------------------------
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error { using Error::Error; };
struct IndexError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct DataError : Error { using Error::Error; };       // empty history, degenerate sets
struct VocabError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct MetricError : Error { using Error::Error; };
struct SamplingError : Error { using Error::Error; };
struct TrainError : Error { using Error::Error; };

namespace numkit {

// ---------------------------------------------------------------------
// Tensor: row-major float64 values. Shape is fixed at construction.
// ---------------------------------------------------------------------
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);  // zero-filled
    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor from(std::vector<int> shape, std::vector<double> values);
    static Tensor scalar(double v) { return from({1}, {v}); }
    static Tensor filled(std::vector<int> shape, double v);

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    long size() const { return static_cast<long>(data_.size()); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](long i) { return data_[static_cast<size_t>(i)]; }
    double operator[](long i) const { return data_[static_cast<size_t>(i)]; }
    double& at(int r, int c) { return data_[static_cast<size_t>(r) * dim(1) + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * dim(1) + c]; }
    double item() const;

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
    std::string shape_str() const;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------
// Rng: splitmix64 stream with keyed splitting into independent
// sub-streams. Integer draws are platform-exact for a given seed.
// ---------------------------------------------------------------------
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}
    static constexpr const char* algorithm() { return "splitmix64"; }

    uint64_t next_u64();
    double uniform();                 // [0, 1)
    double normal(double mean = 0.0, double stddev = 1.0);
    long randint(long n);             // [0, n)
    bool bernoulli(double p) { return uniform() < p; }
    uint64_t state() const { return state_; }

    // Keyed sub-stream derived from the current state; the parent
    // stream is not advanced.
    Rng split(std::string_view key) const;
    Rng split(uint64_t key) const;

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (long i = static_cast<long>(v.size()) - 1; i > 0; --i) {
            long j = randint(i + 1);
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
        }
    }

private:
    uint64_t state_;
};

uint64_t fnv1a64(std::string_view s);
uint64_t fnv1a64_bytes(const void* p, size_t n);

// ---------------------------------------------------------------------
// Plain forward kernels (shape-checked, throwing).
// ---------------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);       // [m,k]x[n,k]^T
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor sigmoid(const Tensor& x);
double sigmoid(double x);
Tensor gelu_tanh(const Tensor& x);
double cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets);

// ---------------------------------------------------------------------
// Parameter: a named trainable tensor with an accumulated gradient and
// persistent Adam moments.
// ---------------------------------------------------------------------
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor m, v;  // Adam moments, sized on first step

    Parameter() = default;
    Parameter(std::string n, Tensor init)
        : name(std::move(n)), value(std::move(init)), grad(value.shape()) {}

    void zero_grad() { grad.fill(0.0); }
};

using ParamSet = std::vector<Parameter*>;

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One bias-corrected Adam update; step_count starts at 1. Gradients are
// expected to be freshly accumulated for this step (zeroed beforehand).
void adam_step(const ParamSet& params, double lr, long step_count, const AdamConfig& cfg = {});

void zero_grads(const ParamSet& params);
std::vector<double> snapshot_values(const ParamSet& params);
void restore_values(const ParamSet& params, const std::vector<double>& snap);

// ---------------------------------------------------------------------
// Tape: reverse-mode autodiff. Nodes are recorded in forward order and
// visited in exact reverse on backward; gradient accumulation is
// additive. Parameter leaves accumulate straight into Parameter::grad,
// so running backward twice doubles those grads.
// ---------------------------------------------------------------------
class Tape {
public:
    using Var = int;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor v);          // leaf without gradient
    Var value_leaf(Tensor v);        // leaf with tracked gradient
    Var param(Parameter& p);         // parameter leaf

    const Tensor& val(Var v) const;
    const Tensor& grad_of(Var v) const;  // valid after backward()

    // Binary / unary ops.
    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);
    Var matvec(Var a, Var x);                       // [m,n]x[n] -> [m]
    Var add(Var a, Var b);                          // same shape
    Var sub(Var a, Var b);
    Var hadamard(Var a, Var b);
    Var add_rowvec(Var x, Var b);                   // [m,n] + [n]
    Var scale(Var x, double c);
    Var add_const(Var x, Tensor c);
    Var mul_const(Var x, Tensor c);                 // elementwise mask
    Var sigmoid(Var x);
    Var tanh(Var x);
    Var gelu(Var x);
    Var softmax_rows(Var x);
    Var layer_norm(Var x, Var gain, Var bias, double eps);

    // Structure ops.
    Var embed_rows(Parameter& table, const std::vector<int>& ids);  // gather param rows
    Var gather_rows(Var x, std::vector<int> rows);
    Var row_vec(Var x, int r);                      // [m,n] -> [n]
    Var sum_rows(Var x, const std::vector<char>& keep);  // masked column sums -> [n]
    Var col_slice(Var x, int c0, int c1);
    Var concat_cols(const std::vector<Var>& xs);
    Var concat_vec(Var a, Var b);
    Var dot(Var a, Var b);                          // [n].[n] -> [1]
    Var max_elem(Var x);                            // grad to first argmax
    Var cross_entropy(Var logits, std::vector<int> targets);   // mean over rows -> [1]
    Var bce_with_logit(Var logit, double label);    // [1] -> [1]

    // Seeds d(out)=seed and propagates to all leaves.
    void backward(Var out, double seed = 1.0);

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;                 // unused for parameter leaves
        Parameter* p = nullptr;
        Tensor grad;                  // lazily allocated during backward
        std::function<void()> back;   // adds into input grads
        bool needs_grad = false;
    };
    std::vector<Node> nodes_;

    Var push(Tensor value, bool needs_grad, std::function<void()> back = nullptr);
    Tensor& grad_buf(Var v);
    void add_grad(Var v, const double* g, long n);
    bool needs(Var v) const { return nodes_[static_cast<size_t>(v)].needs_grad; }

    friend struct TapeOps;
};

// ---------------------------------------------------------------------
// Gradient checking against central finite differences.
// ---------------------------------------------------------------------
struct GradCheckReport {
    bool pass = false;
    double worst_rel_err = 0.0;
    std::string worst_param;
    long worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    long coords_checked = 0;
    std::string to_string() const;
};

// loss(true) must accumulate grads into params and return the loss;
// loss(false) must only return the loss at the current parameter values.
GradCheckReport grad_check(const std::function<double(bool)>& loss,
                           const ParamSet& params, double tol, Rng& rng,
                           int coords_per_param = 4, double h = 1e-5);

}  // namespace numkit
}  // namespace medseq
