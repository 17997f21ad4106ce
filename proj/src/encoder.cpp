#include "medseq/encoder.hpp"

#include <cmath>

namespace medseq::encoder {

using numkit::Parameter;
using numkit::Rng;
using numkit::Tape;
using numkit::Tensor;

void EncoderConfig::validate() const {
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1)
        throw ConfigError("encoder dims must be positive");
    if (d_model % n_heads != 0)
        throw ConfigError("encoder.d_model must be divisible by encoder.n_heads");
    if (max_seq_len < 2)
        throw ConfigError("encoder.max_seq_len must be >= 2");
    if (max_visits < 1) throw ConfigError("encoder.max_visits must be positive");
    if (vocab_size < Vocabulary::kReserved)
        throw ConfigError("encoder.vocab_size must cover the reserved ids");
    if (dropout_rate < 0 || dropout_rate >= 1)
        throw ConfigError("encoder.dropout_rate must be in [0,1)");
}

int InputSequence::real_length() const {
    int n = 0;
    for (char p : pad_mask) n += p ? 0 : 1;
    return n;
}

std::vector<char> InputSequence::keep_mask() const {
    std::vector<char> keep(pad_mask.size());
    for (size_t i = 0; i < pad_mask.size(); ++i) keep[i] = pad_mask[i] ? 0 : 1;
    return keep;
}

void InputSequence::pad_to(int len) {
    while (length() < len) {
        token_ids.push_back(Vocabulary::kPad);
        visit_ids.push_back(visit_ids.empty() ? 0 : visit_ids.back());
        pad_mask.push_back(1);
    }
}

void InputSequence::validate() const {
    if (token_ids.size() != visit_ids.size() || token_ids.size() != pad_mask.size())
        throw ShapeError("input sequence: parallel lists differ in length");
    bool seen_pad = false;
    int prev_visit = -1;
    for (size_t i = 0; i < token_ids.size(); ++i) {
        if (pad_mask[i]) {
            seen_pad = true;
            continue;
        }
        if (seen_pad) throw ShapeError("input sequence: pads must be a tail run");
        if (visit_ids[i] < prev_visit)
            throw ShapeError("input sequence: visit ids must be nondecreasing");
        prev_visit = visit_ids[i];
    }
}

namespace {

Tensor init_matrix(int rows, int cols, Rng& rng, double std_dev = 0.02) {
    Tensor t({rows, cols});
    for (long i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, std_dev);
    return t;
}

Tensor init_vector(int n, Rng& rng, double std_dev = 0.02) {
    Tensor t({n});
    for (long i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, std_dev);
    return t;
}

}  // namespace

EncoderParams EncoderParams::init(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderParams p;
    p.cfg = cfg;
    p.token_embedding = Parameter("token_embedding", init_matrix(cfg.vocab_size, cfg.d_model, rng));
    p.visit_embedding = Parameter("visit_embedding", init_matrix(cfg.max_visits, cfg.d_model, rng));
    p.layers.reserve(static_cast<size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string pre = "layers." + std::to_string(l) + ".";
        Layer layer{
            Parameter(pre + "wq", init_matrix(cfg.d_model, cfg.d_model, rng)),
            Parameter(pre + "bq", Tensor({cfg.d_model})),
            Parameter(pre + "wk", init_matrix(cfg.d_model, cfg.d_model, rng)),
            Parameter(pre + "bk", Tensor({cfg.d_model})),
            Parameter(pre + "wv", init_matrix(cfg.d_model, cfg.d_model, rng)),
            Parameter(pre + "bv", Tensor({cfg.d_model})),
            Parameter(pre + "wo", init_matrix(cfg.d_model, cfg.d_model, rng)),
            Parameter(pre + "bo", Tensor({cfg.d_model})),
            Parameter(pre + "w1", init_matrix(cfg.d_model, cfg.d_ff, rng)),
            Parameter(pre + "b1", Tensor({cfg.d_ff})),
            Parameter(pre + "w2", init_matrix(cfg.d_ff, cfg.d_model, rng)),
            Parameter(pre + "b2", Tensor({cfg.d_model})),
            Parameter(pre + "ln1_g", Tensor::filled({cfg.d_model}, 1.0)),
            Parameter(pre + "ln1_b", Tensor({cfg.d_model})),
            Parameter(pre + "ln2_g", Tensor::filled({cfg.d_model}, 1.0)),
            Parameter(pre + "ln2_b", Tensor({cfg.d_model})),
        };
        p.layers.push_back(std::move(layer));
    }
    p.mlm_bias = Parameter("mlm_bias", init_vector(cfg.vocab_size, rng, 0.0));
    return p;
}

numkit::ParamSet EncoderParams::all_params() {
    numkit::ParamSet ps{&token_embedding, &visit_embedding};
    for (auto& l : layers) {
        for (Parameter* p : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                             &l.w1, &l.b1, &l.w2, &l.b2, &l.ln1_g, &l.ln1_b, &l.ln2_g, &l.ln2_b})
            ps.push_back(p);
    }
    ps.push_back(&mlm_bias);
    return ps;
}

EncoderParams EncoderParams::clone() const {
    EncoderParams c;
    c.cfg = cfg;
    c.token_embedding = Parameter(token_embedding.name, token_embedding.value);
    c.visit_embedding = Parameter(visit_embedding.name, visit_embedding.value);
    for (const auto& l : layers) {
        Layer cl{Parameter(l.wq.name, l.wq.value), Parameter(l.bq.name, l.bq.value),
                 Parameter(l.wk.name, l.wk.value), Parameter(l.bk.name, l.bk.value),
                 Parameter(l.wv.name, l.wv.value), Parameter(l.bv.name, l.bv.value),
                 Parameter(l.wo.name, l.wo.value), Parameter(l.bo.name, l.bo.value),
                 Parameter(l.w1.name, l.w1.value), Parameter(l.b1.name, l.b1.value),
                 Parameter(l.w2.name, l.w2.value), Parameter(l.b2.name, l.b2.value),
                 Parameter(l.ln1_g.name, l.ln1_g.value), Parameter(l.ln1_b.name, l.ln1_b.value),
                 Parameter(l.ln2_g.name, l.ln2_g.value), Parameter(l.ln2_b.name, l.ln2_b.value)};
        c.layers.push_back(std::move(cl));
    }
    c.mlm_bias = Parameter(mlm_bias.name, mlm_bias.value);
    return c;
}

namespace {

InputSequence flatten_visits(const std::vector<cohortgen::Visit>& visits, int first, int last,
                             int budget) {
    std::vector<int> tokens, vids;
    for (int v = first; v < last; ++v) {
        for (int code : visits[static_cast<size_t>(v)].codes) {
            tokens.push_back(code);
            vids.push_back(v);
        }
    }
    if (tokens.empty()) throw DataError("empty history: no codes before the index boundary");
    if (static_cast<int>(tokens.size()) > budget) {
        size_t drop = tokens.size() - static_cast<size_t>(budget);
        tokens.erase(tokens.begin(), tokens.begin() + static_cast<long>(drop));
        vids.erase(vids.begin(), vids.begin() + static_cast<long>(drop));
    }
    int base = vids.front();
    for (int& v : vids) v -= base;
    InputSequence seq;
    seq.token_ids = std::move(tokens);
    seq.visit_ids = std::move(vids);
    seq.pad_mask.assign(seq.token_ids.size(), 0);
    return seq;
}

}  // namespace

InputSequence build_input(const cohortgen::PatientRecord& patient, int max_len,
                          bool reserve_query_slot) {
    int budget = max_len - (reserve_query_slot ? 1 : 0);
    if (budget < 1) throw ConfigError("build_input: sequence budget must be positive");
    int boundary = patient.index_visit;
    if (boundary > static_cast<int>(patient.visits.size()))
        boundary = static_cast<int>(patient.visits.size());
    if (boundary < 1) throw DataError("empty history: patient has no visits before the index");
    return flatten_visits(patient.visits, 0, boundary, budget);
}

InputSequence build_full_input(const cohortgen::PatientRecord& patient, int max_len) {
    if (patient.visits.empty()) throw DataError("empty history: patient has no visits");
    return flatten_visits(patient.visits, 0, static_cast<int>(patient.visits.size()), max_len);
}

Tensor embed_input(const InputSequence& seq, EncoderParams& params) {
    seq.validate();
    numkit::Tape tape;
    EncodeOptions opt;
    Tape::Var x = [&] {
        // embedding-only path: reuse the tape op without the stack
        Tape::Var tok = tape.embed_rows(params.token_embedding, seq.token_ids);
        Tape::Var vis = tape.embed_rows(params.visit_embedding, seq.visit_ids);
        Tape::Var sum = tape.add(tok, vis);
        Tensor mask({seq.length(), params.cfg.d_model});
        for (int i = 0; i < seq.length(); ++i)
            for (int j = 0; j < params.cfg.d_model; ++j)
                mask.at(i, j) = seq.pad_mask[static_cast<size_t>(i)] ? 0.0 : 1.0;
        return tape.mul_const(sum, std::move(mask));
    }();
    (void)opt;
    return tape.val(x);
}

Tape::Var encode_on_tape(Tape& tape, const InputSequence& seq, EncoderParams& params,
                         const EncodeOptions& opt) {
    seq.validate();
    const EncoderConfig& cfg = params.cfg;
    int L = seq.length();
    if (L < 1) throw DataError("encode: empty sequence");
    if (L > cfg.max_seq_len)
        throw ShapeError("encode: sequence length " + std::to_string(L) + " exceeds max_seq_len");
    for (int v : seq.visit_ids)
        if (v < 0 || v >= cfg.max_visits)
            throw IndexError("encode: visit id " + std::to_string(v) + " out of range [0," +
                             std::to_string(cfg.max_visits) + ")");

    const bool use_dropout = opt.training && cfg.dropout_rate > 0.0;
    if (use_dropout && opt.dropout_rng == nullptr)
        throw TrainError("encode: training mode needs a dropout rng");

    auto dropout = [&](Tape::Var x) {
        if (!use_dropout) return x;
        const Tensor& X = tape.val(x);
        Tensor mask(X.shape());
        double keep = 1.0 - cfg.dropout_rate;
        for (long i = 0; i < mask.size(); ++i)
            mask[i] = opt.dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
        return tape.mul_const(x, std::move(mask));
    };

    // Token + visit embeddings; pad rows zeroed.
    Tensor row_mask({L, cfg.d_model});
    Tensor pad_bias({L, L});
    for (int i = 0; i < L; ++i) {
        bool pad = seq.pad_mask[static_cast<size_t>(i)];
        for (int j = 0; j < cfg.d_model; ++j) row_mask.at(i, j) = pad ? 0.0 : 1.0;
        for (int q = 0; q < L; ++q) pad_bias.at(q, i) = pad ? -1e30 : 0.0;
    }
    Tape::Var tok = tape.embed_rows(params.token_embedding, seq.token_ids);
    Tape::Var vis = tape.embed_rows(params.visit_embedding, seq.visit_ids);
    Tape::Var x = tape.mul_const(tape.add(tok, vis), row_mask);

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
    for (auto& layer : params.layers) {
        // Multi-head self-attention, pad keys masked before softmax.
        Tape::Var q = tape.add_rowvec(tape.matmul(x, tape.param(layer.wq)), tape.param(layer.bq));
        Tape::Var k = tape.add_rowvec(tape.matmul(x, tape.param(layer.wk)), tape.param(layer.bk));
        Tape::Var v = tape.add_rowvec(tape.matmul(x, tape.param(layer.wv)), tape.param(layer.bv));
        std::vector<Tape::Var> head_ctx;
        head_ctx.reserve(static_cast<size_t>(cfg.n_heads));
        for (int h = 0; h < cfg.n_heads; ++h) {
            int c0 = h * cfg.head_dim(), c1 = c0 + cfg.head_dim();
            Tape::Var qh = tape.col_slice(q, c0, c1);
            Tape::Var kh = tape.col_slice(k, c0, c1);
            Tape::Var vh = tape.col_slice(v, c0, c1);
            Tape::Var scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_dh);
            scores = tape.add_const(scores, pad_bias);
            Tape::Var attn = tape.softmax_rows(scores);
            head_ctx.push_back(tape.matmul(attn, vh));
        }
        Tape::Var ctx = (head_ctx.size() == 1) ? head_ctx[0] : tape.concat_cols(head_ctx);
        Tape::Var attn_out =
            tape.add_rowvec(tape.matmul(ctx, tape.param(layer.wo)), tape.param(layer.bo));
        attn_out = dropout(attn_out);
        x = tape.layer_norm(tape.add(x, attn_out), tape.param(layer.ln1_g), tape.param(layer.ln1_b),
                            1e-12);

        // Position-wise feed-forward.
        Tape::Var ff =
            tape.gelu(tape.add_rowvec(tape.matmul(x, tape.param(layer.w1)), tape.param(layer.b1)));
        ff = tape.add_rowvec(tape.matmul(ff, tape.param(layer.w2)), tape.param(layer.b2));
        ff = dropout(ff);
        x = tape.layer_norm(tape.add(x, ff), tape.param(layer.ln2_g), tape.param(layer.ln2_b),
                            1e-12);
    }
    // Pad rows are key-masked above; zero them in the output as well.
    return tape.mul_const(x, row_mask);
}

Tensor encode(const InputSequence& seq, EncoderParams& params) {
    numkit::Tape tape;
    Tape::Var out = encode_on_tape(tape, seq, params);
    return tape.val(out);
}

}  // namespace medseq::encoder
