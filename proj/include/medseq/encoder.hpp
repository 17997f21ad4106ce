#pragma once

// Sequence encoder: token + visit embeddings followed by a stack of
// post-norm transformer blocks with pad-masked self-attention.

#include <vector>

#include "medseq/cohortgen.hpp"
#include "medseq/numkit.hpp"
#include "medseq/vocab.hpp"

namespace medseq::encoder {

struct EncoderConfig {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 2;
    int d_ff = 128;
    int max_seq_len = 64;
    int max_visits = 32;
    int vocab_size = 0;
    double dropout_rate = 0.1;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
};

// Flattened code sequence with parallel visit indices. pad_mask[i] is
// true at pad positions; pads only appear at the tail.
struct InputSequence {
    std::vector<int> token_ids;
    std::vector<int> visit_ids;
    std::vector<char> pad_mask;

    int length() const { return static_cast<int>(token_ids.size()); }
    int real_length() const;
    std::vector<char> keep_mask() const;  // !pad
    void pad_to(int len);
    void validate() const;
};

struct EncoderParams {
    struct Layer {
        numkit::Parameter wq, bq, wk, bk, wv, bv, wo, bo;
        numkit::Parameter w1, b1, w2, b2;
        numkit::Parameter ln1_g, ln1_b, ln2_g, ln2_b;
    };

    EncoderConfig cfg;
    numkit::Parameter token_embedding;  // [V, d]
    numkit::Parameter visit_embedding;  // [max_visits, d]
    std::vector<Layer> layers;
    numkit::Parameter mlm_bias;         // [V]; per-token output bias for pretraining

    static EncoderParams init(const EncoderConfig& cfg, numkit::Rng& rng);
    numkit::ParamSet all_params();

    EncoderParams clone() const;
};

// Flattens the visible history (visits strictly before index_visit).
// When the total exceeds the budget the oldest codes are dropped, so
// the most recent `max_len - reserve` codes remain in chronological
// order; visit ids are re-based to start at 0.
InputSequence build_input(const cohortgen::PatientRecord& patient, int max_len,
                          bool reserve_query_slot);

// Same flattening over the full record (all visits); used to assemble
// the pretraining corpus.
InputSequence build_full_input(const cohortgen::PatientRecord& patient, int max_len);

// Embedding lookup: token_embedding[token] + visit_embedding[visit],
// pad rows zeroed.
numkit::Tensor embed_input(const InputSequence& seq, EncoderParams& params);

struct EncodeOptions {
    bool training = false;
    numkit::Rng* dropout_rng = nullptr;  // required when training and dropout_rate > 0
};

// Full stack on the tape; returns the contextual embedding var [L, d].
numkit::Tape::Var encode_on_tape(numkit::Tape& tape, const InputSequence& seq,
                                 EncoderParams& params, const EncodeOptions& opt = {});

// Evaluation-mode convenience wrapper.
numkit::Tensor encode(const InputSequence& seq, EncoderParams& params);

}  // namespace medseq::encoder
