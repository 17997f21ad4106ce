#include "medseq/numkit.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace medseq::numkit {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

long checked_product(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor extents must be positive, got " + std::to_string(d));
        n *= d;
    }
    return n;
}

void require_2d(const Tensor& t, const char* who) {
    if (t.ndim() != 2) throw ShapeError(std::string(who) + ": expected 2-D tensor, got " + t.shape_str());
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_scalar(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad_scalar(double x) {
    double u = kGeluC * (x + kGeluA * x * x * x);
    double t = std::tanh(u);
    double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

void softmax_rows_into(const double* x, double* out, int m, int n) {
    for (int i = 0; i < m; ++i) {
        const double* xi = x + static_cast<long>(i) * n;
        double* oi = out + static_cast<long>(i) * n;
        double mx = xi[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            oi[j] = std::exp(xi[j] - mx);
            s += oi[j];
        }
        double inv = 1.0 / s;
        for (int j = 0; j < n; ++j) oi[j] *= inv;
    }
}

}  // namespace

// ------------------------------------------------------------------ Tensor

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(checked_product(shape_)), 0.0);
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
    Tensor t;
    long n = checked_product(shape);
    if (n != static_cast<long>(values.size()))
        throw ShapeError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape product " + std::to_string(n));
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
}

Tensor Tensor::filled(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() requires a size-1 tensor, got " + shape_str());
    return data_[0];
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
}

// ------------------------------------------------------------------ Rng

uint64_t Rng::next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal(double mean, double stddev) {
    // Box-Muller, two fresh uniforms per draw (no cached spare).
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586 * u2);
}

long Rng::randint(long n) {
    if (n <= 0) throw IndexError("randint: n must be positive");
    unsigned __int128 wide = static_cast<unsigned __int128>(next_u64());
    return static_cast<long>((wide * static_cast<unsigned __int128>(n)) >> 64);
}

namespace {
uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}
}  // namespace

uint64_t fnv1a64(std::string_view s) { return fnv1a64_bytes(s.data(), s.size()); }

uint64_t fnv1a64_bytes(const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    uint64_t h = 0xCBF29CE484222325ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

Rng Rng::split(std::string_view key) const {
    return Rng(mix64(state_ ^ (fnv1a64(key) + 0x9E3779B97F4A7C15ULL)));
}

Rng Rng::split(uint64_t key) const {
    return Rng(mix64(state_ ^ (mix64(key) + 0x9E3779B97F4A7C15ULL)));
}

// ------------------------------------------------------------------ plain kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner extents differ, " + a.shape_str() + " x " + b.shape_str());
    Tensor c({a.dim(0), b.dim(1)});
    MapMat(c.data(), a.dim(0), b.dim(1)).noalias() =
        CMapMat(a.data(), a.dim(0), a.dim(1)) * CMapMat(b.data(), b.dim(0), b.dim(1));
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_nt");
    require_2d(b, "matmul_nt");
    if (a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt: inner extents differ, " + a.shape_str() + " x " + b.shape_str() + "^T");
    Tensor c({a.dim(0), b.dim(0)});
    MapMat(c.data(), a.dim(0), b.dim(0)).noalias() =
        CMapMat(a.data(), a.dim(0), a.dim(1)) * CMapMat(b.data(), b.dim(0), b.dim(1)).transpose();
    return c;
}

Tensor softmax_rows(const Tensor& x) {
    require_2d(x, "softmax_rows");
    for (long i = 0; i < x.size(); ++i)
        if (std::isnan(x[i])) throw NumericError("softmax_rows: NaN input");
    Tensor out(x.shape());
    softmax_rows_into(x.data(), out.data(), x.dim(0), x.dim(1));
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_2d(x, "layer_norm");
    int m = x.dim(0), n = x.dim(1);
    if (n < 2) throw ShapeError("layer_norm: row width must be >= 2");
    if (gain.size() != n || bias.size() != n)
        throw ShapeError("layer_norm: gain/bias must have length " + std::to_string(n));
    Tensor out(x.shape());
    for (int i = 0; i < m; ++i) {
        const double* xi = x.data() + static_cast<long>(i) * n;
        double* oi = out.data() + static_cast<long>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += xi[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= n;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < n; ++j) oi[j] = (xi[j] - mean) * inv * gain[j] + bias[j];
    }
    return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor sigmoid(const Tensor& x) {
    Tensor out(x.shape());
    for (long i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
    return out;
}

Tensor gelu_tanh(const Tensor& x) {
    Tensor out(x.shape());
    for (long i = 0; i < x.size(); ++i) out[i] = gelu_scalar(x[i]);
    return out;
}

double cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets) {
    require_2d(logits, "cross_entropy_logits");
    int m = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != m)
        throw ShapeError("cross_entropy_logits: expected " + std::to_string(m) + " targets");
    double total = 0.0;
    for (int i = 0; i < m; ++i) {
        int t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= v)
            throw IndexError("cross_entropy_logits: target " + std::to_string(t) +
                             " out of range [0," + std::to_string(v) + ")");
        const double* li = logits.data() + static_cast<long>(i) * v;
        double mx = li[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, li[j]);
        double lse = 0.0;
        for (int j = 0; j < v; ++j) lse += std::exp(li[j] - mx);
        total += std::log(lse) + mx - li[t];
    }
    return total / m;
}

// ------------------------------------------------------------------ optimizer

void adam_step(const ParamSet& params, double lr, long step_count, const AdamConfig& cfg) {
    if (step_count < 1) throw TrainError("adam_step: step_count starts at 1");
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
    for (Parameter* p : params) {
        if (p->m.empty()) {
            p->m = Tensor(p->value.shape());
            p->v = Tensor(p->value.shape());
        }
        long n = p->value.size();
        for (long i = 0; i < n; ++i) {
            double g = p->grad[i];
            p->m[i] = cfg.beta1 * p->m[i] + (1.0 - cfg.beta1) * g;
            p->v[i] = cfg.beta2 * p->v[i] + (1.0 - cfg.beta2) * g * g;
            double mhat = p->m[i] / bc1;
            double vhat = p->v[i] / bc2;
            p->value[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

void zero_grads(const ParamSet& params) {
    for (Parameter* p : params) p->zero_grad();
}

std::vector<double> snapshot_values(const ParamSet& params) {
    std::vector<double> out;
    size_t total = 0;
    for (Parameter* p : params) total += static_cast<size_t>(p->value.size());
    out.reserve(total);
    for (Parameter* p : params)
        out.insert(out.end(), p->value.data(), p->value.data() + p->value.size());
    return out;
}

void restore_values(const ParamSet& params, const std::vector<double>& snap) {
    size_t k = 0;
    for (Parameter* p : params) {
        long n = p->value.size();
        if (k + static_cast<size_t>(n) > snap.size())
            throw ShapeError("restore_values: snapshot too short");
        std::memcpy(p->value.data(), snap.data() + k, static_cast<size_t>(n) * sizeof(double));
        k += static_cast<size_t>(n);
    }
    if (k != snap.size()) throw ShapeError("restore_values: snapshot length mismatch");
}

// ------------------------------------------------------------------ Tape

Tape::Var Tape::push(Tensor value, bool needs_grad, std::function<void()> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size()) - 1;
}

Tape::Var Tape::constant(Tensor v) { return push(std::move(v), false); }

Tape::Var Tape::value_leaf(Tensor v) { return push(std::move(v), true); }

Tape::Var Tape::param(Parameter& p) {
    Node n;
    n.p = &p;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size()) - 1;
}

const Tensor& Tape::val(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(v)];
    return n.p ? n.p->value : n.value;
}

Tensor& Tape::grad_buf(Var v) {
    Node& n = nodes_[static_cast<size_t>(v)];
    if (n.p) return n.p->grad;
    if (n.grad.empty()) n.grad = Tensor(val(v).shape());
    return n.grad;
}

const Tensor& Tape::grad_of(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(v)];
    if (n.p) return n.p->grad;
    return n.grad;
}

void Tape::add_grad(Var v, const double* g, long n) {
    if (!needs(v)) return;
    Tensor& dst = grad_buf(v);
    if (dst.size() != n) throw ShapeError("internal: gradient size mismatch");
    double* d = dst.data();
    for (long i = 0; i < n; ++i) d[i] += g[i];
}

void Tape::backward(Var out, double seed) {
    if (val(out).size() != 1) throw ShapeError("backward: output must be scalar");
    // Reset transient node grads; parameter grads accumulate across calls.
    for (auto& n : nodes_)
        if (!n.p && !n.grad.empty()) n.grad.fill(0.0);
    {
        Node& n = nodes_[static_cast<size_t>(out)];
        if (n.p) {
            n.p->grad[0] += seed;
        } else {
            if (n.grad.empty()) n.grad = Tensor(val(out).shape());
            n.grad[0] = seed;
        }
    }
    for (long i = out; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.needs_grad || !n.back) continue;
        if (!n.p && n.grad.empty()) continue;  // no incoming gradient
        n.back();
    }
}

// Shared helpers for op closures.
struct TapeOps {
    static const Tensor& v(Tape* t, Tape::Var x) { return t->val(x); }
    static Tensor& g(Tape* t, Tape::Var x) { return t->grad_buf(x); }
    static bool needs(Tape* t, Tape::Var x) { return t->needs(x); }
    static const Tensor& outg(Tape* t, Tape::Var x) { return t->grad_buf(x); }
};

Tape::Var Tape::matmul(Var a, Var b) {
    Tensor c = numkit::matmul(val(a), val(b));
    bool ng = needs(a) || needs(b);
    Var out = push(std::move(c), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, a, b, out]() {
        const Tensor& go = TapeOps::outg(t, out);
        const Tensor& A = TapeOps::v(t, a);
        const Tensor& B = TapeOps::v(t, b);
        int m = A.dim(0), k = A.dim(1), n = B.dim(1);
        if (TapeOps::needs(t, a)) {
            MapMat(TapeOps::g(t, a).data(), m, k).noalias() +=
                CMapMat(go.data(), m, n) * CMapMat(B.data(), k, n).transpose();
        }
        if (TapeOps::needs(t, b)) {
            MapMat(TapeOps::g(t, b).data(), k, n).noalias() +=
                CMapMat(A.data(), m, k).transpose() * CMapMat(go.data(), m, n);
        }
    };
    return out;
}

Tape::Var Tape::matmul_nt(Var a, Var b) {
    Tensor c = numkit::matmul_nt(val(a), val(b));
    bool ng = needs(a) || needs(b);
    Var out = push(std::move(c), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, a, b, out]() {
        const Tensor& go = TapeOps::outg(t, out);
        const Tensor& A = TapeOps::v(t, a);
        const Tensor& B = TapeOps::v(t, b);
        int m = A.dim(0), k = A.dim(1), n = B.dim(0);
        if (TapeOps::needs(t, a)) {
            MapMat(TapeOps::g(t, a).data(), m, k).noalias() +=
                CMapMat(go.data(), m, n) * CMapMat(B.data(), n, k);
        }
        if (TapeOps::needs(t, b)) {
            MapMat(TapeOps::g(t, b).data(), n, k).noalias() +=
                CMapMat(go.data(), m, n).transpose() * CMapMat(A.data(), m, k);
        }
    };
    return out;
}

Tape::Var Tape::matvec(Var a, Var x) {
    const Tensor& A = val(a);
    const Tensor& X = val(x);
    require_2d(A, "matvec");
    if (X.ndim() != 1 || X.dim(0) != A.dim(1))
        throw ShapeError("matvec: " + A.shape_str() + " x " + X.shape_str());
    int m = A.dim(0), n = A.dim(1);
    Tensor y({m});
    MapVec(y.data(), m).noalias() = CMapMat(A.data(), m, n) * CMapVec(X.data(), n);
    bool ng = needs(a) || needs(x);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, a, x, out, m, n]() {
        const Tensor& go = TapeOps::outg(t, out);
        if (TapeOps::needs(t, a)) {
            MapMat(TapeOps::g(t, a).data(), m, n).noalias() +=
                CMapVec(go.data(), m) * CMapVec(TapeOps::v(t, x).data(), n).transpose();
        }
        if (TapeOps::needs(t, x)) {
            MapVec(TapeOps::g(t, x).data(), n).noalias() +=
                CMapMat(TapeOps::v(t, a).data(), m, n).transpose() * CMapVec(go.data(), m);
        }
    };
    return out;
}

Tape::Var Tape::add(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B)) throw ShapeError("add: " + A.shape_str() + " vs " + B.shape_str());
    Tensor c(A.shape());
    for (long i = 0; i < A.size(); ++i) c[i] = A[i] + B[i];
    bool ng = needs(a) || needs(b);
    Var out = push(std::move(c), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, a, b, out]() {
        const Tensor& go = TapeOps::outg(t, out);
        t->add_grad(a, go.data(), go.size());
        t->add_grad(b, go.data(), go.size());
    };
    return out;
}

Tape::Var Tape::sub(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B)) throw ShapeError("sub: " + A.shape_str() + " vs " + B.shape_str());
    Tensor c(A.shape());
    for (long i = 0; i < A.size(); ++i) c[i] = A[i] - B[i];
    bool ng = needs(a) || needs(b);
    Var out = push(std::move(c), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, a, b, out]() {
        const Tensor& go = TapeOps::outg(t, out);
        t->add_grad(a, go.data(), go.size());
        if (TapeOps::needs(t, b)) {
            Tensor& gb = TapeOps::g(t, b);
            for (long i = 0; i < go.size(); ++i) gb[i] -= go[i];
        }
    };
    return out;
}

Tape::Var Tape::hadamard(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (!A.same_shape(B)) throw ShapeError("hadamard: " + A.shape_str() + " vs " + B.shape_str());
    Tensor c(A.shape());
    for (long i = 0; i < A.size(); ++i) c[i] = A[i] * B[i];
    bool ng = needs(a) || needs(b);
    Var out = push(std::move(c), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, a, b, out]() {
        const Tensor& go = TapeOps::outg(t, out);
        const Tensor& A2 = TapeOps::v(t, a);
        const Tensor& B2 = TapeOps::v(t, b);
        if (TapeOps::needs(t, a)) {
            Tensor& ga = TapeOps::g(t, a);
            for (long i = 0; i < go.size(); ++i) ga[i] += go[i] * B2[i];
        }
        if (TapeOps::needs(t, b)) {
            Tensor& gb = TapeOps::g(t, b);
            for (long i = 0; i < go.size(); ++i) gb[i] += go[i] * A2[i];
        }
    };
    return out;
}

Tape::Var Tape::add_rowvec(Var x, Var b) {
    const Tensor& X = val(x);
    const Tensor& B = val(b);
    require_2d(X, "add_rowvec");
    if (B.ndim() != 1 || B.dim(0) != X.dim(1))
        throw ShapeError("add_rowvec: " + X.shape_str() + " + " + B.shape_str());
    int m = X.dim(0), n = X.dim(1);
    Tensor c(X.shape());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) c.at(i, j) = X.at(i, j) + B[j];
    bool ng = needs(x) || needs(b);
    Var out = push(std::move(c), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, b, out, m, n]() {
        const Tensor& go = TapeOps::outg(t, out);
        t->add_grad(x, go.data(), go.size());
        if (TapeOps::needs(t, b)) {
            Tensor& gb = TapeOps::g(t, b);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gb[j] += go.at(i, j);
        }
    };
    return out;
}

Tape::Var Tape::scale(Var x, double c) {
    const Tensor& X = val(x);
    Tensor y(X.shape());
    for (long i = 0; i < X.size(); ++i) y[i] = X[i] * c;
    bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, out, c]() {
        const Tensor& go = TapeOps::outg(t, out);
        Tensor& gx = TapeOps::g(t, x);
        for (long i = 0; i < go.size(); ++i) gx[i] += go[i] * c;
    };
    return out;
}

Tape::Var Tape::add_const(Var x, Tensor c) {
    const Tensor& X = val(x);
    if (!X.same_shape(c)) throw ShapeError("add_const: " + X.shape_str() + " vs " + c.shape_str());
    Tensor y(X.shape());
    for (long i = 0; i < X.size(); ++i) y[i] = X[i] + c[i];
    bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, out]() {
        const Tensor& go = TapeOps::outg(t, out);
        t->add_grad(x, go.data(), go.size());
    };
    return out;
}

Tape::Var Tape::mul_const(Var x, Tensor c) {
    const Tensor& X = val(x);
    if (!X.same_shape(c)) throw ShapeError("mul_const: " + X.shape_str() + " vs " + c.shape_str());
    Tensor y(X.shape());
    for (long i = 0; i < X.size(); ++i) y[i] = X[i] * c[i];
    bool ng = needs(x);
    Var mask = constant(std::move(c));
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, out, mask]() {
        const Tensor& go = TapeOps::outg(t, out);
        const Tensor& M = TapeOps::v(t, mask);
        Tensor& gx = TapeOps::g(t, x);
        for (long i = 0; i < go.size(); ++i) gx[i] += go[i] * M[i];
    };
    return out;
}

Tape::Var Tape::sigmoid(Var x) {
    const Tensor& X = val(x);
    Tensor y(X.shape());
    for (long i = 0; i < X.size(); ++i) y[i] = numkit::sigmoid(X[i]);
    bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, out]() {
        const Tensor& go = TapeOps::outg(t, out);
        const Tensor& Y = TapeOps::v(t, out);
        Tensor& gx = TapeOps::g(t, x);
        for (long i = 0; i < go.size(); ++i) gx[i] += go[i] * Y[i] * (1.0 - Y[i]);
    };
    return out;
}

Tape::Var Tape::tanh(Var x) {
    const Tensor& X = val(x);
    Tensor y(X.shape());
    for (long i = 0; i < X.size(); ++i) y[i] = std::tanh(X[i]);
    bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, out]() {
        const Tensor& go = TapeOps::outg(t, out);
        const Tensor& Y = TapeOps::v(t, out);
        Tensor& gx = TapeOps::g(t, x);
        for (long i = 0; i < go.size(); ++i) gx[i] += go[i] * (1.0 - Y[i] * Y[i]);
    };
    return out;
}

Tape::Var Tape::gelu(Var x) {
    const Tensor& X = val(x);
    Tensor y(X.shape());
    for (long i = 0; i < X.size(); ++i) y[i] = gelu_scalar(X[i]);
    bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, out]() {
        const Tensor& go = TapeOps::outg(t, out);
        const Tensor& X2 = TapeOps::v(t, x);
        Tensor& gx = TapeOps::g(t, x);
        for (long i = 0; i < go.size(); ++i) gx[i] += go[i] * gelu_grad_scalar(X2[i]);
    };
    return out;
}

Tape::Var Tape::softmax_rows(Var x) {
    const Tensor& X = val(x);
    require_2d(X, "softmax_rows");
    Tensor y(X.shape());
    softmax_rows_into(X.data(), y.data(), X.dim(0), X.dim(1));
    bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, out]() {
        const Tensor& go = TapeOps::outg(t, out);
        const Tensor& S = TapeOps::v(t, out);
        Tensor& gx = TapeOps::g(t, x);
        int m = S.dim(0), n = S.dim(1);
        for (int i = 0; i < m; ++i) {
            double inner = 0.0;
            for (int j = 0; j < n; ++j) inner += go.at(i, j) * S.at(i, j);
            for (int j = 0; j < n; ++j) gx.at(i, j) += S.at(i, j) * (go.at(i, j) - inner);
        }
    };
    return out;
}

Tape::Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
    Tensor y = numkit::layer_norm(val(x), val(gain), val(bias), eps);
    bool ng = needs(x) || needs(gain) || needs(bias);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, gain, bias, out, eps]() {
        const Tensor& go = TapeOps::outg(t, out);
        const Tensor& X = TapeOps::v(t, x);
        const Tensor& G = TapeOps::v(t, gain);
        int m = X.dim(0), n = X.dim(1);
        for (int i = 0; i < m; ++i) {
            const double* xi = X.data() + static_cast<long>(i) * n;
            const double* gi = go.data() + static_cast<long>(i) * n;
            double mean = 0.0;
            for (int j = 0; j < n; ++j) mean += xi[j];
            mean /= n;
            double var = 0.0;
            for (int j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
            var /= n;
            double inv = 1.0 / std::sqrt(var + eps);
            if (TapeOps::needs(t, gain) || TapeOps::needs(t, bias)) {
                for (int j = 0; j < n; ++j) {
                    double xhat = (xi[j] - mean) * inv;
                    if (TapeOps::needs(t, gain)) TapeOps::g(t, gain)[j] += gi[j] * xhat;
                    if (TapeOps::needs(t, bias)) TapeOps::g(t, bias)[j] += gi[j];
                }
            }
            if (TapeOps::needs(t, x)) {
                double mq = 0.0, mqx = 0.0;
                for (int j = 0; j < n; ++j) {
                    double q = gi[j] * G[j];
                    double xhat = (xi[j] - mean) * inv;
                    mq += q;
                    mqx += q * xhat;
                }
                mq /= n;
                mqx /= n;
                Tensor& gx = TapeOps::g(t, x);
                for (int j = 0; j < n; ++j) {
                    double q = gi[j] * G[j];
                    double xhat = (xi[j] - mean) * inv;
                    gx.at(i, j) += inv * (q - mq - xhat * mqx);
                }
            }
        }
    };
    return out;
}

Tape::Var Tape::embed_rows(Parameter& table, const std::vector<int>& ids) {
    const Tensor& T = table.value;
    require_2d(T, "embed_rows");
    int rows = T.dim(0), n = T.dim(1);
    Tensor y({static_cast<int>(ids.size()), n});
    for (size_t r = 0; r < ids.size(); ++r) {
        int id = ids[r];
        if (id < 0 || id >= rows)
            throw IndexError("embed_rows: id " + std::to_string(id) + " out of range [0," +
                             std::to_string(rows) + ") for " + table.name);
        std::memcpy(y.data() + r * static_cast<size_t>(n),
                    T.data() + static_cast<size_t>(id) * n, static_cast<size_t>(n) * sizeof(double));
    }
    Var out = push(std::move(y), true);
    Tape* t = this;
    Parameter* tb = &table;
    std::vector<int> ids_copy = ids;
    nodes_.back().back = [t, tb, ids_copy, out]() {
        const Tensor& go = TapeOps::outg(t, out);
        int n = go.dim(1);
        for (size_t r = 0; r < ids_copy.size(); ++r) {
            double* dst = tb->grad.data() + static_cast<size_t>(ids_copy[r]) * n;
            const double* src = go.data() + r * static_cast<size_t>(n);
            for (int j = 0; j < n; ++j) dst[j] += src[j];
        }
    };
    return out;
}

Tape::Var Tape::gather_rows(Var x, std::vector<int> rows) {
    const Tensor& X = val(x);
    require_2d(X, "gather_rows");
    int m = X.dim(0), n = X.dim(1);
    Tensor y({static_cast<int>(rows.size()), n});
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= m)
            throw IndexError("gather_rows: row " + std::to_string(rows[r]) + " out of range");
        std::memcpy(y.data() + r * static_cast<size_t>(n),
                    X.data() + static_cast<size_t>(rows[r]) * n, static_cast<size_t>(n) * sizeof(double));
    }
    bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, rows, out]() {
        const Tensor& go = TapeOps::outg(t, out);
        Tensor& gx = TapeOps::g(t, x);
        int n = go.dim(1);
        for (size_t r = 0; r < rows.size(); ++r) {
            double* dst = gx.data() + static_cast<size_t>(rows[r]) * n;
            const double* src = go.data() + r * static_cast<size_t>(n);
            for (int j = 0; j < n; ++j) dst[j] += src[j];
        }
    };
    return out;
}

Tape::Var Tape::row_vec(Var x, int r) {
    const Tensor& X = val(x);
    require_2d(X, "row_vec");
    if (r < 0 || r >= X.dim(0)) throw IndexError("row_vec: row out of range");
    int n = X.dim(1);
    Tensor y({n});
    std::memcpy(y.data(), X.data() + static_cast<size_t>(r) * n, static_cast<size_t>(n) * sizeof(double));
    bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, r, out, n]() {
        const Tensor& go = TapeOps::outg(t, out);
        Tensor& gx = TapeOps::g(t, x);
        double* dst = gx.data() + static_cast<size_t>(r) * n;
        for (int j = 0; j < n; ++j) dst[j] += go[j];
    };
    return out;
}

Tape::Var Tape::sum_rows(Var x, const std::vector<char>& keep) {
    const Tensor& X = val(x);
    require_2d(X, "sum_rows");
    int m = X.dim(0), n = X.dim(1);
    if (static_cast<int>(keep.size()) != m)
        throw ShapeError("sum_rows: keep mask length mismatch");
    Tensor y({n});
    for (int i = 0; i < m; ++i) {
        if (!keep[static_cast<size_t>(i)]) continue;
        for (int j = 0; j < n; ++j) y[j] += X.at(i, j);
    }
    bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    std::vector<char> keep_copy = keep;
    nodes_.back().back = [t, x, keep_copy, out, m, n]() {
        const Tensor& go = TapeOps::outg(t, out);
        Tensor& gx = TapeOps::g(t, x);
        for (int i = 0; i < m; ++i) {
            if (!keep_copy[static_cast<size_t>(i)]) continue;
            for (int j = 0; j < n; ++j) gx.at(i, j) += go[j];
        }
    };
    return out;
}

Tape::Var Tape::col_slice(Var x, int c0, int c1) {
    const Tensor& X = val(x);
    require_2d(X, "col_slice");
    int m = X.dim(0), n = X.dim(1);
    if (c0 < 0 || c1 > n || c0 >= c1) throw IndexError("col_slice: bad column range");
    int w = c1 - c0;
    Tensor y({m, w});
    for (int i = 0; i < m; ++i)
        std::memcpy(y.data() + static_cast<size_t>(i) * w,
                    X.data() + static_cast<size_t>(i) * n + c0, static_cast<size_t>(w) * sizeof(double));
    bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, out, c0, w, m, n]() {
        const Tensor& go = TapeOps::outg(t, out);
        Tensor& gx = TapeOps::g(t, x);
        for (int i = 0; i < m; ++i) {
            double* dst = gx.data() + static_cast<size_t>(i) * n + c0;
            const double* src = go.data() + static_cast<size_t>(i) * w;
            for (int j = 0; j < w; ++j) dst[j] += src[j];
        }
    };
    return out;
}

Tape::Var Tape::concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols: empty input");
    int m = val(xs[0]).dim(0);
    int total = 0;
    for (Var x : xs) {
        require_2d(val(x), "concat_cols");
        if (val(x).dim(0) != m) throw ShapeError("concat_cols: row counts differ");
        total += val(x).dim(1);
    }
    Tensor y({m, total});
    int off = 0;
    for (Var x : xs) {
        const Tensor& X = val(x);
        int w = X.dim(1);
        for (int i = 0; i < m; ++i)
            std::memcpy(y.data() + static_cast<size_t>(i) * total + off,
                        X.data() + static_cast<size_t>(i) * w, static_cast<size_t>(w) * sizeof(double));
        off += w;
    }
    bool ng = false;
    for (Var x : xs) ng = ng || needs(x);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    std::vector<Var> xs_copy = xs;
    nodes_.back().back = [t, xs_copy, out, m, total]() {
        const Tensor& go = TapeOps::outg(t, out);
        int off2 = 0;
        for (Var x : xs_copy) {
            int w = TapeOps::v(t, x).dim(1);
            if (TapeOps::needs(t, x)) {
                Tensor& gx = TapeOps::g(t, x);
                for (int i = 0; i < m; ++i) {
                    const double* src = go.data() + static_cast<size_t>(i) * total + off2;
                    double* dst = gx.data() + static_cast<size_t>(i) * w;
                    for (int j = 0; j < w; ++j) dst[j] += src[j];
                }
            }
            off2 += w;
        }
    };
    return out;
}

Tape::Var Tape::concat_vec(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.ndim() != 1 || B.ndim() != 1) throw ShapeError("concat_vec: expects 1-D inputs");
    int na = A.dim(0), nb = B.dim(0);
    Tensor y({na + nb});
    std::memcpy(y.data(), A.data(), static_cast<size_t>(na) * sizeof(double));
    std::memcpy(y.data() + na, B.data(), static_cast<size_t>(nb) * sizeof(double));
    bool ng = needs(a) || needs(b);
    Var out = push(std::move(y), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, a, b, out, na, nb]() {
        const Tensor& go = TapeOps::outg(t, out);
        if (TapeOps::needs(t, a)) {
            Tensor& ga = TapeOps::g(t, a);
            for (int i = 0; i < na; ++i) ga[i] += go[i];
        }
        if (TapeOps::needs(t, b)) {
            Tensor& gb = TapeOps::g(t, b);
            for (int i = 0; i < nb; ++i) gb[i] += go[na + i];
        }
    };
    return out;
}

Tape::Var Tape::dot(Var a, Var b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.ndim() != 1 || !A.same_shape(B))
        throw ShapeError("dot: " + A.shape_str() + " . " + B.shape_str());
    double s = 0.0;
    for (long i = 0; i < A.size(); ++i) s += A[i] * B[i];
    bool ng = needs(a) || needs(b);
    Var out = push(Tensor::scalar(s), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, a, b, out]() {
        double g = TapeOps::outg(t, out)[0];
        const Tensor& A2 = TapeOps::v(t, a);
        const Tensor& B2 = TapeOps::v(t, b);
        if (TapeOps::needs(t, a)) {
            Tensor& ga = TapeOps::g(t, a);
            for (long i = 0; i < A2.size(); ++i) ga[i] += g * B2[i];
        }
        if (TapeOps::needs(t, b)) {
            Tensor& gb = TapeOps::g(t, b);
            for (long i = 0; i < B2.size(); ++i) gb[i] += g * A2[i];
        }
    };
    return out;
}

Tape::Var Tape::max_elem(Var x) {
    const Tensor& X = val(x);
    if (X.size() < 1) throw ShapeError("max_elem: empty tensor");
    long arg = 0;
    for (long i = 1; i < X.size(); ++i)
        if (X[i] > X[arg]) arg = i;
    bool ng = needs(x);
    Var out = push(Tensor::scalar(X[arg]), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, x, out, arg]() {
        TapeOps::g(t, x)[arg] += TapeOps::outg(t, out)[0];
    };
    return out;
}

Tape::Var Tape::cross_entropy(Var logits, std::vector<int> targets) {
    double loss = numkit::cross_entropy_logits(val(logits), targets);
    bool ng = needs(logits);
    Var out = push(Tensor::scalar(loss), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, logits, targets, out]() {
        double g = TapeOps::outg(t, out)[0];
        const Tensor& L = TapeOps::v(t, logits);
        int m = L.dim(0), v = L.dim(1);
        Tensor sm(L.shape());
        softmax_rows_into(L.data(), sm.data(), m, v);
        Tensor& gx = TapeOps::g(t, logits);
        double scale = g / m;
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < v; ++j) gx.at(i, j) += scale * sm.at(i, j);
            gx.at(i, targets[static_cast<size_t>(i)]) -= scale;
        }
    };
    return out;
}

Tape::Var Tape::bce_with_logit(Var logit, double label) {
    const Tensor& S = val(logit);
    if (S.size() != 1) throw ShapeError("bce_with_logit: expects scalar logit");
    double s = S[0];
    // log(1+e^s) - y*s computed stably
    double loss = std::max(s, 0.0) - label * s + std::log1p(std::exp(-std::fabs(s)));
    bool ng = needs(logit);
    Var out = push(Tensor::scalar(loss), ng);
    if (!ng) return out;
    Tape* t = this;
    nodes_.back().back = [t, logit, out, s, label]() {
        double g = TapeOps::outg(t, out)[0];
        TapeOps::g(t, logit)[0] += g * (numkit::sigmoid(s) - label);
    };
    return out;
}

// ------------------------------------------------------------------ grad check

std::string GradCheckReport::to_string() const {
    std::ostringstream os;
    os << (pass ? "PASS" : "FAIL") << " worst rel err " << worst_rel_err << " at " << worst_param
       << "[" << worst_index << "] analytic=" << analytic << " numeric=" << numeric
       << " (" << coords_checked << " coords)";
    return os.str();
}

GradCheckReport grad_check(const std::function<double(bool)>& loss, const ParamSet& params,
                           double tol, Rng& rng, int coords_per_param, double h) {
    zero_grads(params);
    loss(true);
    GradCheckReport rep;
    rep.pass = true;
    for (Parameter* p : params) {
        long n = p->value.size();
        int k = static_cast<int>(std::min<long>(coords_per_param, n));
        for (int c = 0; c < k; ++c) {
            long idx = (n <= coords_per_param) ? c : rng.randint(n);
            double saved = p->value[idx];
            p->value[idx] = saved + h;
            double lp = loss(false);
            p->value[idx] = saved - h;
            double lm = loss(false);
            p->value[idx] = saved;
            double numeric = (lp - lm) / (2.0 * h);
            double analytic = p->grad[idx];
            double rel = std::fabs(analytic - numeric) / std::max(1.0, std::fabs(analytic));
            ++rep.coords_checked;
            if (rel > rep.worst_rel_err) {
                rep.worst_rel_err = rel;
                rep.worst_param = p->name;
                rep.worst_index = idx;
                rep.analytic = analytic;
                rep.numeric = numeric;
            }
        }
    }
    rep.pass = rep.worst_rel_err < tol;
    return rep;
}

}  // namespace medseq::numkit
