#include "medseq/mlm.hpp"

#include <cmath>
#include <numeric>
#include <ostream>

namespace medseq::mlm {

using encoder::EncoderParams;
using encoder::InputSequence;
using encoder::Vocabulary;
using numkit::Rng;
using numkit::Tape;
using numkit::Tensor;

void MaskingPolicy::validate() const {
    if (select_rate < 0 || select_rate >= 1)
        throw ConfigError("masking select_rate must be in [0,1)");
    if (mask_frac < 0 || random_frac < 0 || keep_frac < 0)
        throw ConfigError("masking fractions must be nonnegative");
    if (std::fabs(mask_frac + random_frac + keep_frac - 1.0) > 1e-9)
        throw ConfigError("masking fractions must sum to 1");
}

std::vector<int> MaskedSequence::selected_positions() const {
    std::vector<int> out;
    for (size_t i = 0; i < targets.size(); ++i)
        if (targets[i] != kSentinel) out.push_back(static_cast<int>(i));
    return out;
}

std::vector<int> MaskedSequence::selected_targets() const {
    std::vector<int> out;
    for (int t : targets)
        if (t != kSentinel) out.push_back(t);
    return out;
}

MaskedSequence apply_masking(const InputSequence& seq, const MaskingPolicy& policy,
                             int vocab_size, Rng& rng) {
    policy.validate();
    if (vocab_size <= Vocabulary::kReserved)
        throw ConfigError("apply_masking: vocabulary has no clinical codes");
    if (seq.real_length() < 1) throw DataError("apply_masking: sequence has no real tokens");

    MaskedSequence out;
    out.seq = seq;
    out.targets.assign(seq.token_ids.size(), MaskedSequence::kSentinel);

    std::vector<char> selected(seq.token_ids.size(), 0);
    for (;;) {
        int n_selected = 0;
        for (size_t i = 0; i < seq.token_ids.size(); ++i) {
            if (seq.pad_mask[i]) continue;
            selected[i] = rng.bernoulli(policy.select_rate) ? 1 : 0;
            n_selected += selected[i];
        }
        if (n_selected > 0 || !policy.force_min_one || policy.select_rate <= 0.0) break;
    }

    for (size_t i = 0; i < seq.token_ids.size(); ++i) {
        if (!selected[i]) continue;
        out.targets[i] = seq.token_ids[i];
        double u = rng.uniform();
        if (u < policy.mask_frac) {
            out.seq.token_ids[i] = Vocabulary::kMask;
        } else if (u < policy.mask_frac + policy.random_frac) {
            out.seq.token_ids[i] = Vocabulary::kReserved +
                static_cast<int>(rng.randint(vocab_size - Vocabulary::kReserved));
        }
        // else: left unchanged
    }
    return out;
}

Tape::Var mlm_logits_on_tape(Tape& tape, Tape::Var contextual, EncoderParams& params) {
    Tape::Var logits = tape.matmul_nt(contextual, tape.param(params.token_embedding));
    return tape.add_rowvec(logits, tape.param(params.mlm_bias));
}

Tensor mlm_logits(const Tensor& contextual, EncoderParams& params) {
    Tape tape;
    Tape::Var ctx = tape.constant(contextual);
    return tape.val(mlm_logits_on_tape(tape, ctx, params));
}

void PretrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("pretrain.epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("pretrain.batch_size must be positive");
    if (learning_rate <= 0) throw ConfigError("pretrain.learning_rate must be positive");
    policy.validate();
}

Tape::Var sequence_loss_on_tape(Tape& tape, const cohortgen::PatientRecord& rec,
                                EncoderParams& params, const MaskingPolicy& policy, Rng& rng,
                                bool training) {
    InputSequence seq = encoder::build_full_input(rec, params.cfg.max_seq_len);
    MaskedSequence masked = apply_masking(seq, policy, params.cfg.vocab_size, rng);
    encoder::EncodeOptions opt;
    opt.training = training;
    opt.dropout_rng = training ? &rng : nullptr;
    Tape::Var ctx = encoder::encode_on_tape(tape, masked.seq, params, opt);
    Tape::Var logits = mlm_logits_on_tape(tape, ctx, params);
    Tape::Var picked = tape.gather_rows(logits, masked.selected_positions());
    return tape.cross_entropy(picked, masked.selected_targets());
}

double heldout_loss(const std::vector<const cohortgen::PatientRecord*>& heldout,
                    EncoderParams& params, const MaskingPolicy& policy, Rng rng) {
    if (heldout.empty()) throw DataError("heldout_loss: empty evaluation set");
    double total = 0.0;
    for (const auto* rec : heldout) {
        Rng prng = rng.split(static_cast<uint64_t>(rec->patient_id));
        Tape tape;
        total += tape.val(sequence_loss_on_tape(tape, *rec, params, policy, prng, false)).item();
    }
    return total / static_cast<double>(heldout.size());
}

PretrainResult pretrain(EncoderParams& params,
                        const std::vector<const cohortgen::PatientRecord*>& train,
                        const std::vector<const cohortgen::PatientRecord*>& heldout,
                        const PretrainConfig& cfg, Rng& rng, std::ostream* log) {
    cfg.validate();
    if (train.empty()) throw DataError("pretrain: empty training corpus");

    PretrainResult result;
    numkit::ParamSet ps = params.all_params();
    Rng eval_rng = rng.split("heldout-mask");

    auto eval_and_log = [&](int epoch) {
        double loss = heldout_loss(heldout, params, cfg.policy, eval_rng);
        result.heldout_loss.push_back(loss);
        if (log)
            (*log) << "pretrain epoch " << epoch << " heldout_mlm_loss " << loss << "\n";
        return loss;
    };

    if (!heldout.empty()) eval_and_log(0);

    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), size_t{0});
    long step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng erng = rng.split("epoch").split(static_cast<uint64_t>(epoch));
        erng.shuffle(order);
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_size)) {
            size_t end = std::min(order.size(), at + static_cast<size_t>(cfg.batch_size));
            double inv = 1.0 / static_cast<double>(end - at);
            numkit::zero_grads(ps);
            double batch_loss = 0.0;
            for (size_t i = at; i < end; ++i) {
                const auto* rec = train[order[i]];
                Rng prng = erng.split(static_cast<uint64_t>(rec->patient_id));
                Tape tape;
                Tape::Var loss = sequence_loss_on_tape(tape, *rec, params, cfg.policy, prng, true);
                batch_loss += tape.val(loss).item() * inv;
                tape.backward(loss, inv);
            }
            if (std::isnan(batch_loss))
                throw TrainError("pretraining diverged: NaN loss at step " + std::to_string(step + 1));
            ++step;
            numkit::adam_step(ps, cfg.learning_rate, step);
        }
        if (!heldout.empty()) eval_and_log(epoch);
    }
    result.steps = step;
    result.final_rng_state = rng.state();
    return result;
}

}  // namespace medseq::mlm
