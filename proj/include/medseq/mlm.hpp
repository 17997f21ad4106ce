#pragma once

// Masked-token pretraining of the sequence encoder.

#include <iosfwd>
#include <vector>

#include "medseq/encoder.hpp"

namespace medseq::mlm {

struct MaskingPolicy {
    double select_rate = 0.15;
    double mask_frac = 0.80;
    double random_frac = 0.10;
    double keep_frac = 0.10;
    bool force_min_one = true;

    void validate() const;
};

// Corrupted sequence plus per-position recovery targets; kSentinel
// marks unselected positions, so the loss can only ever see selected
// ones.
struct MaskedSequence {
    static constexpr int kSentinel = -1;
    encoder::InputSequence seq;
    std::vector<int> targets;

    std::vector<int> selected_positions() const;
    std::vector<int> selected_targets() const;
};

MaskedSequence apply_masking(const encoder::InputSequence& seq, const MaskingPolicy& policy,
                             int vocab_size, numkit::Rng& rng);

// logits = contextual x token_embedding^T + per-token bias. The output
// projection is tied to the embedding matrix, so pretraining geometry
// matches the dot-product scoring used by the prediction heads.
numkit::Tensor mlm_logits(const numkit::Tensor& contextual, encoder::EncoderParams& params);
numkit::Tape::Var mlm_logits_on_tape(numkit::Tape& tape, numkit::Tape::Var contextual,
                                     encoder::EncoderParams& params);

struct PretrainConfig {
    int epochs = 5;
    int batch_size = 100;
    double learning_rate = 1e-3;
    MaskingPolicy policy;

    void validate() const;
};

struct PretrainResult {
    std::vector<double> heldout_loss;  // index 0 = before training
    uint64_t final_rng_state = 0;
    long steps = 0;
};

// Masked loss for one record over the full visit trajectory.
numkit::Tape::Var sequence_loss_on_tape(numkit::Tape& tape, const cohortgen::PatientRecord& rec,
                                        encoder::EncoderParams& params, const MaskingPolicy& policy,
                                        numkit::Rng& rng, bool training);

double heldout_loss(const std::vector<const cohortgen::PatientRecord*>& heldout,
                    encoder::EncoderParams& params, const MaskingPolicy& policy, numkit::Rng rng);

// Minimizes the masked cross-entropy over the training records; logs
// the held-out loss once per epoch to `log` when given.
PretrainResult pretrain(encoder::EncoderParams& params,
                        const std::vector<const cohortgen::PatientRecord*>& train,
                        const std::vector<const cohortgen::PatientRecord*>& heldout,
                        const PretrainConfig& cfg, numkit::Rng& rng, std::ostream* log = nullptr);

}  // namespace medseq::mlm
