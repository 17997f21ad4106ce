#pragma once

// Synthetic longitudinal code-sequence cohorts with a planted,
// learnable onset signal and index-visit semantics.

#include <optional>
#include <string>
#include <vector>

#include "medseq/numkit.hpp"
#include "medseq/vocab.hpp"

namespace medseq::cohortgen {

struct Visit {
    std::vector<int> codes;
    bool operator==(const Visit&) const = default;
};

// For cases, index_visit is the visit holding the first onset code and
// history is everything strictly before it. Controls carry no onset
// code; their index_visit is one past the last visit, so the whole
// record is visible history.
struct PatientRecord {
    long patient_id = 0;
    std::vector<Visit> visits;
    int label = 0;
    int index_visit = 0;

    int visible_visits() const { return index_visit; }
    bool operator==(const PatientRecord&) const = default;
};

struct GenConfig {
    long n_patients = 20000;
    int visits_min = 2;
    int visits_max = 6;
    int codes_per_visit_min = 1;
    int codes_per_visit_max = 4;
    double risk_code_rate = 0.18;     // chance each drawn code is a risk code
    double signal_strength = 1.3;     // onset log-odds per distinct risk code
    double case_rate = 0.393;         // target case fraction (bias auto-tuned)
    double confounder_rate = 0.05;    // fraction of would-be controls excluded
    int n_risk_codes = 24;
    int n_confounder_codes = 12;
    int n_background_codes = 460;
    double background_zipf = 1.1;     // frequency skew of background codes

    void validate() const;
};

// Disjoint partitions of the non-reserved vocabulary. The 8 onset codes
// stand in for the target diagnosis family; confounder codes model the
// excluded other-cancer class.
struct CodeUniverse {
    std::vector<int> target_ids;
    std::vector<int> risk_ids;
    std::vector<int> confounder_ids;
    std::vector<int> background_ids;
    std::vector<double> background_cdf;

    static constexpr int kTargetCodes = 8;

    static CodeUniverse build(encoder::Vocabulary& vocab, const GenConfig& cfg);

    int sample_background(numkit::Rng& rng) const;
    int sample_risk(numkit::Rng& rng) const;
    int sample_target(numkit::Rng& rng) const;
    bool is_target(int id) const;
    bool is_confounder(int id) const;
    bool is_risk(int id) const;
};

enum class SplitKind { Train = 0, Val = 1, Test = 2 };

struct SplitSizes {
    long train = 0, val = 0, test = 0;
};

struct Cohort {
    std::vector<PatientRecord> patients;
    std::vector<SplitKind> split;  // parallel to patients; set by split_cohort
    double tuned_bias = 0.0;

    long case_count() const;
};

// One generation attempt; excluded=true marks a would-be control that
// drew confounder codes and must be regenerated.
struct GenAttempt {
    PatientRecord rec;
    bool excluded = false;
};

GenAttempt gen_patient_attempt(const GenConfig& cfg, const CodeUniverse& u, numkit::Rng& rng,
                               double bias);
PatientRecord gen_patient(const GenConfig& cfg, const CodeUniverse& u, numkit::Rng& rng,
                          double bias);

// Pilot-samples histories and solves for the onset bias that hits
// cfg.case_rate in expectation.
double tune_bias(const GenConfig& cfg, const CodeUniverse& u, numkit::Rng& rng);

Cohort gen_cohort(const GenConfig& cfg, const CodeUniverse& u, numkit::Rng& rng);

// train = n - floor(n/10) - floor(n/5); remainders go to train.
SplitSizes split_sizes(long n);
std::vector<SplitKind> split_cohort(const Cohort& cohort, numkit::Rng& rng);

}  // namespace medseq::cohortgen
