#pragma once

// The three onset-prediction formulations on top of the pretrained
// encoder: a binary-classification head on the sum-pooled contextual
// vector, a token-prediction head scoring the pooled vector against the
// onset-code label tensor, and a next-visit masked-token head scoring
// the contextual vector at an appended query token.

#include <optional>
#include <string>
#include <vector>

#include "medseq/encoder.hpp"

namespace medseq::heads {

enum class HeadKind { Bc, Sum, Mask };
const char* head_kind_name(HeadKind k);

// The onset code strings with their token ids; disjoint from the
// confounder (exclusion) codes by construction of the universe.
struct TargetCodeSet {
    std::vector<std::string> codes;
    std::vector<int> ids;

    static TargetCodeSet from_universe(const encoder::Vocabulary& vocab,
                                       const cohortgen::CodeUniverse& universe);
    static TargetCodeSet from_codes(const encoder::Vocabulary& vocab,
                                    const std::vector<std::string>& codes);
};

// K x d matrix of onset-code token-embedding rows, gathered bitwise at
// extraction time.
struct LabelTensor {
    std::vector<int> code_ids;
    numkit::Tensor matrix;
};

LabelTensor extract_label_tensor(const encoder::EncoderParams& params,
                                 const TargetCodeSet& targets);

struct BcParams {
    numkit::Parameter w;  // [d]
    numkit::Parameter b;  // [1]

    static BcParams init(int d_model, numkit::Rng& rng);
};

struct Prediction {
    HeadKind kind = HeadKind::Bc;
    std::optional<std::vector<double>> sub_scores;
    std::optional<std::vector<double>> sub_probs;
    double final_prob = 0.5;

    static Prediction from_final(HeadKind kind, double prob);
    static Prediction from_scores(HeadKind kind, std::vector<double> scores);
};

// Column-wise sum over non-pad rows.
numkit::Tensor pool_sum(const numkit::Tensor& contextual, const std::vector<char>& pad_mask);
numkit::Tape::Var pool_sum_on_tape(numkit::Tape& tape, numkit::Tape::Var contextual,
                                   const std::vector<char>& pad_mask);

Prediction predict_bc(const numkit::Tensor& contextual, const std::vector<char>& pad_mask,
                      BcParams& params);
Prediction predict_sum(const numkit::Tensor& contextual, const std::vector<char>& pad_mask,
                       const LabelTensor& label);

// History built with one reserved slot, then a mask token appended at
// the next visit position (last retained visit id + 1).
encoder::InputSequence build_mask_query(const cohortgen::PatientRecord& patient, int max_len);

Prediction predict_mask(const cohortgen::PatientRecord& patient, encoder::EncoderParams& params,
                        const LabelTensor& label);

// Binary cross-entropy on the final probability (clamped to
// [1e-7, 1-1e-7]); with sub-scores, gradients flow through the argmax
// element only.
double finetune_loss(const Prediction& pred, int label);

enum class LossMode { MaxProb, MultiLabel };

struct HeadOptions {
    bool trainable_label_tensor = true;
    LossMode loss_mode = LossMode::MaxProb;
};

// A trainable head+encoder bundle used by the experiment harness.
class EncoderHeadModel {
public:
    EncoderHeadModel(HeadKind kind, encoder::EncoderParams params, TargetCodeSet targets,
                     numkit::Rng& init_rng, HeadOptions options = {});

    HeadKind kind() const { return kind_; }
    numkit::ParamSet trainable_params();
    encoder::EncoderParams& encoder_params() { return params_; }
    BcParams& bc_params() { return bc_; }

    // Training loss for one record on the caller's tape.
    numkit::Tape::Var loss_on_tape(numkit::Tape& tape, const cohortgen::PatientRecord& rec,
                                   numkit::Rng& rng);

    Prediction predict(const cohortgen::PatientRecord& rec);
    double score(const cohortgen::PatientRecord& rec);  // eval-mode final_prob

private:
    numkit::Tape::Var scores_on_tape(numkit::Tape& tape, const cohortgen::PatientRecord& rec,
                                     bool training, numkit::Rng* rng);

    HeadKind kind_;
    encoder::EncoderParams params_;
    TargetCodeSet targets_;
    BcParams bc_;
    HeadOptions opt_;
};

}  // namespace medseq::heads
