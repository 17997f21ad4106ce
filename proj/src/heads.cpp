#include "medseq/heads.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace medseq::heads {

using cohortgen::PatientRecord;
using encoder::EncoderParams;
using encoder::InputSequence;
using encoder::Vocabulary;
using numkit::Parameter;
using numkit::Rng;
using numkit::Tape;
using numkit::Tensor;

const char* head_kind_name(HeadKind k) {
    switch (k) {
        case HeadKind::Bc: return "bc";
        case HeadKind::Sum: return "sum";
        case HeadKind::Mask: return "mask";
    }
    return "?";
}

TargetCodeSet TargetCodeSet::from_codes(const Vocabulary& vocab,
                                        const std::vector<std::string>& codes) {
    if (codes.empty()) throw VocabError("target code set must be non-empty");
    TargetCodeSet t;
    for (const auto& c : codes) {
        int id = vocab.id(c);  // throws VocabError when unknown
        if (id < Vocabulary::kReserved)
            throw VocabError("target code '" + c + "' maps to a reserved id");
        if (std::find(t.ids.begin(), t.ids.end(), id) != t.ids.end())
            throw VocabError("duplicate target code '" + c + "'");
        t.codes.push_back(c);
        t.ids.push_back(id);
    }
    return t;
}

TargetCodeSet TargetCodeSet::from_universe(const Vocabulary& vocab,
                                           const cohortgen::CodeUniverse& universe) {
    std::vector<std::string> codes;
    for (int id : universe.target_ids) codes.push_back(vocab.code(id));
    TargetCodeSet t = from_codes(vocab, codes);
    for (int id : t.ids)
        if (universe.is_confounder(id))
            throw VocabError("target code overlaps the exclusion set");
    return t;
}

LabelTensor extract_label_tensor(const EncoderParams& params, const TargetCodeSet& targets) {
    const Tensor& emb = params.token_embedding.value;
    int d = emb.dim(1);
    LabelTensor lt;
    lt.code_ids = targets.ids;
    lt.matrix = Tensor({static_cast<int>(targets.ids.size()), d});
    for (size_t k = 0; k < targets.ids.size(); ++k) {
        int id = targets.ids[k];
        if (id < 0 || id >= emb.dim(0))
            throw VocabError("label tensor id " + std::to_string(id) + " outside embedding table");
        std::memcpy(lt.matrix.data() + k * static_cast<size_t>(d),
                    emb.data() + static_cast<size_t>(id) * d, static_cast<size_t>(d) * sizeof(double));
    }
    return lt;
}

BcParams BcParams::init(int d_model, Rng& rng) {
    Tensor w({d_model});
    for (long i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, 0.02);
    BcParams p;
    p.w = Parameter("bc.w", std::move(w));
    p.b = Parameter("bc.b", Tensor({1}));
    return p;
}

Prediction Prediction::from_final(HeadKind kind, double prob) {
    Prediction p;
    p.kind = kind;
    p.final_prob = prob;
    return p;
}

Prediction Prediction::from_scores(HeadKind kind, std::vector<double> scores) {
    if (scores.empty()) throw ShapeError("prediction needs at least one sub-score");
    Prediction p;
    p.kind = kind;
    p.sub_probs = std::vector<double>(scores.size());
    double best = -1.0;
    for (size_t i = 0; i < scores.size(); ++i) {
        (*p.sub_probs)[i] = numkit::sigmoid(scores[i]);
        best = std::max(best, (*p.sub_probs)[i]);
    }
    p.sub_scores = std::move(scores);
    p.final_prob = best;
    return p;
}

Tensor pool_sum(const Tensor& contextual, const std::vector<char>& pad_mask) {
    Tape tape;
    Tape::Var ctx = tape.constant(contextual);
    return tape.val(pool_sum_on_tape(tape, ctx, pad_mask));
}

Tape::Var pool_sum_on_tape(Tape& tape, Tape::Var contextual, const std::vector<char>& pad_mask) {
    const Tensor& ctx = tape.val(contextual);
    if (ctx.ndim() != 2) throw ShapeError("pool_sum: expected [L,d], got " + ctx.shape_str());
    if (static_cast<int>(pad_mask.size()) != ctx.dim(0))
        throw ShapeError("pool_sum: pad mask length mismatch");
    std::vector<char> keep(pad_mask.size());
    int real = 0;
    for (size_t i = 0; i < pad_mask.size(); ++i) {
        keep[i] = pad_mask[i] ? 0 : 1;
        real += keep[i];
    }
    if (real == 0) throw DataError("empty history: pool_sum over all-pad input");
    return tape.sum_rows(contextual, keep);
}

Prediction predict_bc(const Tensor& contextual, const std::vector<char>& pad_mask,
                      BcParams& params) {
    Tape tape;
    Tape::Var pooled = pool_sum_on_tape(tape, tape.constant(contextual), pad_mask);
    Tape::Var logit = tape.add(tape.dot(pooled, tape.param(params.w)), tape.param(params.b));
    return Prediction::from_final(HeadKind::Bc, numkit::sigmoid(tape.val(logit).item()));
}

Prediction predict_sum(const Tensor& contextual, const std::vector<char>& pad_mask,
                       const LabelTensor& label) {
    Tape tape;
    Tape::Var pooled = pool_sum_on_tape(tape, tape.constant(contextual), pad_mask);
    Tape::Var scores = tape.matvec(tape.constant(label.matrix), pooled);
    const Tensor& s = tape.val(scores);
    return Prediction::from_scores(HeadKind::Sum,
                                   std::vector<double>(s.data(), s.data() + s.size()));
}

InputSequence build_mask_query(const PatientRecord& patient, int max_len) {
    InputSequence seq = encoder::build_input(patient, max_len, /*reserve_query_slot=*/true);
    int next_visit = seq.visit_ids.back() + 1;
    seq.token_ids.push_back(Vocabulary::kMask);
    seq.visit_ids.push_back(next_visit);
    seq.pad_mask.push_back(0);
    return seq;
}

Prediction predict_mask(const PatientRecord& patient, EncoderParams& params,
                        const LabelTensor& label) {
    InputSequence seq = build_mask_query(patient, params.cfg.max_seq_len);
    Tape tape;
    Tape::Var ctx = encoder::encode_on_tape(tape, seq, params);
    Tape::Var at_mask = tape.row_vec(ctx, seq.length() - 1);
    Tape::Var scores = tape.matvec(tape.constant(label.matrix), at_mask);
    const Tensor& s = tape.val(scores);
    return Prediction::from_scores(HeadKind::Mask,
                                   std::vector<double>(s.data(), s.data() + s.size()));
}

double finetune_loss(const Prediction& pred, int label) {
    if (label != 0 && label != 1) throw DataError("finetune_loss: label must be 0 or 1");
    double p = std::clamp(pred.final_prob, 1e-7, 1.0 - 1e-7);
    return label ? -std::log(p) : -std::log(1.0 - p);
}

// ------------------------------------------------------------------ model

EncoderHeadModel::EncoderHeadModel(HeadKind kind, EncoderParams params, TargetCodeSet targets,
                                   Rng& init_rng, HeadOptions options)
    : kind_(kind), params_(std::move(params)), targets_(std::move(targets)), opt_(options) {
    bc_ = BcParams::init(params_.cfg.d_model, init_rng);
}

numkit::ParamSet EncoderHeadModel::trainable_params() {
    numkit::ParamSet ps;
    for (Parameter* p : params_.all_params())
        if (p != &params_.mlm_bias) ps.push_back(p);  // pretraining-only bias stays frozen
    if (kind_ == HeadKind::Bc) {
        ps.push_back(&bc_.w);
        ps.push_back(&bc_.b);
    }
    return ps;
}

Tape::Var EncoderHeadModel::scores_on_tape(Tape& tape, const PatientRecord& rec, bool training,
                                           Rng* rng) {
    encoder::EncodeOptions opt;
    opt.training = training;
    opt.dropout_rng = rng;
    if (kind_ == HeadKind::Mask) {
        InputSequence seq = build_mask_query(rec, params_.cfg.max_seq_len);
        Tape::Var ctx = encoder::encode_on_tape(tape, seq, params_, opt);
        Tape::Var at_mask = tape.row_vec(ctx, seq.length() - 1);
        Tape::Var label = opt_.trainable_label_tensor
                              ? tape.embed_rows(params_.token_embedding, targets_.ids)
                              : tape.constant(extract_label_tensor(params_, targets_).matrix);
        return tape.matvec(label, at_mask);
    }
    InputSequence seq = encoder::build_input(rec, params_.cfg.max_seq_len, false);
    Tape::Var ctx = encoder::encode_on_tape(tape, seq, params_, opt);
    Tape::Var pooled = pool_sum_on_tape(tape, ctx, seq.pad_mask);
    if (kind_ == HeadKind::Bc)
        return tape.add(tape.dot(pooled, tape.param(bc_.w)), tape.param(bc_.b));
    Tape::Var label = opt_.trainable_label_tensor
                          ? tape.embed_rows(params_.token_embedding, targets_.ids)
                          : tape.constant(extract_label_tensor(params_, targets_).matrix);
    return tape.matvec(label, pooled);
}

Tape::Var EncoderHeadModel::loss_on_tape(Tape& tape, const PatientRecord& rec, Rng& rng) {
    Tape::Var scores = scores_on_tape(tape, rec, true, &rng);
    if (kind_ == HeadKind::Bc)
        return tape.bce_with_logit(scores, static_cast<double>(rec.label));

    if (opt_.loss_mode == LossMode::MaxProb)
        return tape.bce_with_logit(tape.max_elem(scores), static_cast<double>(rec.label));

    // Multi-label alternative: each onset code is its own sub-label;
    // for cases only the observed onset code is positive.
    int observed = -1;
    if (rec.label == 1) {
        const auto& onset = rec.visits[static_cast<size_t>(rec.index_visit)];
        for (int code : onset.codes)
            for (size_t k = 0; k < targets_.ids.size(); ++k)
                if (targets_.ids[k] == code) observed = static_cast<int>(k);
    }
    int K = static_cast<int>(targets_.ids.size());
    std::vector<Tape::Var> losses;
    for (int k = 0; k < K; ++k) {
        Tensor basis({K});
        basis[k] = 1.0;
        Tape::Var sk = tape.dot(scores, tape.constant(std::move(basis)));
        double y = (rec.label == 1 && k == observed) ? 1.0 : 0.0;
        losses.push_back(tape.bce_with_logit(sk, y));
    }
    Tape::Var acc = losses[0];
    for (int k = 1; k < K; ++k) acc = tape.add(acc, losses[static_cast<size_t>(k)]);
    return tape.scale(acc, 1.0 / K);
}

Prediction EncoderHeadModel::predict(const PatientRecord& rec) {
    Tape tape;
    Tape::Var scores = scores_on_tape(tape, rec, false, nullptr);
    if (kind_ == HeadKind::Bc)
        return Prediction::from_final(HeadKind::Bc, numkit::sigmoid(tape.val(scores).item()));
    const Tensor& s = tape.val(scores);
    return Prediction::from_scores(kind_, std::vector<double>(s.data(), s.data() + s.size()));
}

double EncoderHeadModel::score(const PatientRecord& rec) { return predict(rec).final_prob; }

}  // namespace medseq::heads
