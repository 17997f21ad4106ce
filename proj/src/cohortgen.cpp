#include "medseq/cohortgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace medseq::encoder {

Vocabulary::Vocabulary() {
    id_to_code_ = {"[PAD]", "[MASK]", "[UNK]"};
    for (int i = 0; i < kReserved; ++i) code_to_id_[id_to_code_[static_cast<size_t>(i)]] = i;
}

int Vocabulary::add(const std::string& code) {
    if (code.empty() || code.find('\n') != std::string::npos || code.find('\t') != std::string::npos)
        throw VocabError("invalid code string: '" + code + "'");
    auto it = code_to_id_.find(code);
    if (it != code_to_id_.end()) return it->second;
    int id = size();
    id_to_code_.push_back(code);
    code_to_id_[code] = id;
    return id;
}

int Vocabulary::id(const std::string& code) const {
    auto it = code_to_id_.find(code);
    if (it == code_to_id_.end()) throw VocabError("unknown code: '" + code + "'");
    return it->second;
}

bool Vocabulary::contains(const std::string& code) const {
    return code_to_id_.count(code) > 0;
}

const std::string& Vocabulary::code(int id) const {
    if (id < 0 || id >= size())
        throw IndexError("vocabulary id " + std::to_string(id) + " out of range");
    return id_to_code_[static_cast<size_t>(id)];
}

std::string Vocabulary::to_text() const {
    std::ostringstream os;
    os << "# medseq vocabulary v1\n";
    os << "# reserved: 0=[PAD] 1=[MASK] 2=[UNK]\n";
    for (int i = 0; i < size(); ++i) os << id_to_code_[static_cast<size_t>(i)] << "\t" << i << "\n";
    return os.str();
}

void Vocabulary::save(const std::string& path) const {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp);
        out << to_text();
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot rename " + tmp + " to " + path);
}

Vocabulary Vocabulary::from_text(const std::string& text) {
    Vocabulary v;
    std::istringstream in(text);
    std::string line;
    int expected = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw VocabError("malformed vocabulary line: '" + line + "'");
        std::string code = line.substr(0, tab);
        int id = std::stoi(line.substr(tab + 1));
        if (id != expected)
            throw VocabError("vocabulary ids must be sequential; expected " +
                             std::to_string(expected) + ", got " + std::to_string(id));
        if (id < kReserved) {
            if (code != v.id_to_code_[static_cast<size_t>(id)])
                throw VocabError("reserved id " + std::to_string(id) + " renamed to '" + code + "'");
        } else {
            v.add(code);
        }
        ++expected;
    }
    if (expected < kReserved) throw VocabError("vocabulary missing reserved entries");
    return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

}  // namespace medseq::encoder

namespace medseq::cohortgen {

using numkit::Rng;

void GenConfig::validate() const {
    if (n_patients < 1) throw ConfigError("gen.n_patients must be positive");
    if (visits_min < 1 || visits_max < visits_min)
        throw ConfigError("gen.visits range is empty");
    if (codes_per_visit_min < 1 || codes_per_visit_max < codes_per_visit_min)
        throw ConfigError("gen.codes_per_visit range is empty");
    if (risk_code_rate < 0 || risk_code_rate > 1)
        throw ConfigError("gen.risk_code_rate must be in [0,1]");
    if (signal_strength < 0) throw ConfigError("gen.signal_strength must be >= 0");
    if (case_rate < 0 || case_rate > 1)
        throw ConfigError("gen.case_rate must be in [0,1]");
    if (confounder_rate < 0 || confounder_rate > 1)
        throw ConfigError("gen.confounder_rate must be in [0,1]");
    if (n_risk_codes < 1 || n_confounder_codes < 1 || n_background_codes < 1)
        throw ConfigError("gen code pools must be non-empty");
    if (background_zipf < 0) throw ConfigError("gen.background_zipf must be >= 0");
}

CodeUniverse CodeUniverse::build(encoder::Vocabulary& vocab, const GenConfig& cfg) {
    CodeUniverse u;
    char buf[32];
    for (int i = 0; i < kTargetCodes; ++i) {
        std::snprintf(buf, sizeof(buf), "onset_%d", i);
        u.target_ids.push_back(vocab.add(buf));
    }
    for (int i = 0; i < cfg.n_risk_codes; ++i) {
        std::snprintf(buf, sizeof(buf), "risk_%03d", i);
        u.risk_ids.push_back(vocab.add(buf));
    }
    for (int i = 0; i < cfg.n_confounder_codes; ++i) {
        std::snprintf(buf, sizeof(buf), "excl_%03d", i);
        u.confounder_ids.push_back(vocab.add(buf));
    }
    for (int i = 0; i < cfg.n_background_codes; ++i) {
        std::snprintf(buf, sizeof(buf), "bg_%04d", i);
        u.background_ids.push_back(vocab.add(buf));
    }
    // Zipf-like frequency profile over background codes.
    u.background_cdf.resize(u.background_ids.size());
    double z = 0.0;
    for (size_t i = 0; i < u.background_ids.size(); ++i)
        z += std::pow(static_cast<double>(i + 1), -cfg.background_zipf);
    double acc = 0.0;
    for (size_t i = 0; i < u.background_ids.size(); ++i) {
        acc += std::pow(static_cast<double>(i + 1), -cfg.background_zipf) / z;
        u.background_cdf[i] = acc;
    }
    u.background_cdf.back() = 1.0;
    return u;
}

int CodeUniverse::sample_background(Rng& rng) const {
    double x = rng.uniform();
    auto it = std::upper_bound(background_cdf.begin(), background_cdf.end(), x);
    size_t i = static_cast<size_t>(it - background_cdf.begin());
    if (i >= background_ids.size()) i = background_ids.size() - 1;
    return background_ids[i];
}

int CodeUniverse::sample_risk(Rng& rng) const {
    return risk_ids[static_cast<size_t>(rng.randint(static_cast<long>(risk_ids.size())))];
}

int CodeUniverse::sample_target(Rng& rng) const {
    return target_ids[static_cast<size_t>(rng.randint(static_cast<long>(target_ids.size())))];
}

bool CodeUniverse::is_target(int id) const {
    return std::find(target_ids.begin(), target_ids.end(), id) != target_ids.end();
}
bool CodeUniverse::is_confounder(int id) const {
    return std::find(confounder_ids.begin(), confounder_ids.end(), id) != confounder_ids.end();
}
bool CodeUniverse::is_risk(int id) const {
    return std::find(risk_ids.begin(), risk_ids.end(), id) != risk_ids.end();
}

long Cohort::case_count() const {
    long c = 0;
    for (const auto& p : patients) c += p.label;
    return c;
}

namespace {

std::vector<Visit> draw_history(const GenConfig& cfg, const CodeUniverse& u, Rng& rng,
                                int* distinct_risk) {
    int n_visits = cfg.visits_min +
                   static_cast<int>(rng.randint(cfg.visits_max - cfg.visits_min + 1));
    std::vector<Visit> visits(static_cast<size_t>(n_visits));
    std::set<int> risks;
    for (auto& v : visits) {
        int n_codes = cfg.codes_per_visit_min +
                      static_cast<int>(rng.randint(cfg.codes_per_visit_max - cfg.codes_per_visit_min + 1));
        v.codes.reserve(static_cast<size_t>(n_codes));
        for (int c = 0; c < n_codes; ++c) {
            int code = rng.bernoulli(cfg.risk_code_rate) ? u.sample_risk(rng)
                                                         : u.sample_background(rng);
            v.codes.push_back(code);
            if (u.is_risk(code)) risks.insert(code);
        }
    }
    *distinct_risk = static_cast<int>(risks.size());
    return visits;
}

}  // namespace

GenAttempt gen_patient_attempt(const GenConfig& cfg, const CodeUniverse& u, Rng& rng,
                               double bias) {
    GenAttempt out;
    int distinct = 0;
    out.rec.visits = draw_history(cfg, u, rng, &distinct);
    double r = numkit::sigmoid(cfg.signal_strength * distinct + bias);
    bool is_case;
    if (cfg.case_rate <= 0.0) is_case = false;
    else if (cfg.case_rate >= 1.0) is_case = true;
    else is_case = rng.bernoulli(r);

    if (is_case) {
        Visit onset;
        onset.codes.push_back(u.sample_target(rng));
        out.rec.index_visit = static_cast<int>(out.rec.visits.size());
        out.rec.visits.push_back(std::move(onset));
        out.rec.label = 1;
        return out;
    }
    if (rng.bernoulli(cfg.confounder_rate)) {
        // Analog other-cancer patient: gets confounder codes, then is
        // excluded from the cohort (caller regenerates).
        int k = 1 + static_cast<int>(rng.randint(2));
        for (int i = 0; i < k; ++i) {
            size_t v = static_cast<size_t>(rng.randint(static_cast<long>(out.rec.visits.size())));
            out.rec.visits[v].codes.push_back(
                u.confounder_ids[static_cast<size_t>(rng.randint(static_cast<long>(u.confounder_ids.size())))]);
        }
        out.excluded = true;
        return out;
    }
    out.rec.label = 0;
    out.rec.index_visit = static_cast<int>(out.rec.visits.size());
    return out;
}

PatientRecord gen_patient(const GenConfig& cfg, const CodeUniverse& u, Rng& rng, double bias) {
    for (;;) {
        GenAttempt a = gen_patient_attempt(cfg, u, rng, bias);
        if (!a.excluded) return std::move(a.rec);
    }
}

double tune_bias(const GenConfig& cfg, const CodeUniverse& u, Rng& rng) {
    if (cfg.case_rate <= 0.0 || cfg.case_rate >= 1.0) return 0.0;  // unused in the extremes
    Rng pilot = rng.split("bias-pilot");
    constexpr int kPilot = 4000;
    std::vector<int> counts(kPilot);
    for (int i = 0; i < kPilot; ++i) {
        int distinct = 0;
        draw_history(cfg, u, pilot, &distinct);
        counts[static_cast<size_t>(i)] = distinct;
    }
    double lo = -30.0, hi = 30.0;
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        double mean = 0.0;
        for (int c : counts) mean += numkit::sigmoid(cfg.signal_strength * c + mid);
        mean /= kPilot;
        if (mean < cfg.case_rate) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

Cohort gen_cohort(const GenConfig& cfg, const CodeUniverse& u, Rng& rng) {
    cfg.validate();
    Cohort cohort;
    cohort.tuned_bias = tune_bias(cfg, u, rng);
    cohort.patients.reserve(static_cast<size_t>(cfg.n_patients));
    Rng base = rng.split("patient");
    for (long i = 0; i < cfg.n_patients; ++i) {
        Rng prng = base.split(static_cast<uint64_t>(i));
        PatientRecord rec = gen_patient(cfg, u, prng, cohort.tuned_bias);
        rec.patient_id = i;
        cohort.patients.push_back(std::move(rec));
    }
    cohort.split = split_cohort(cohort, rng);
    return cohort;
}

SplitSizes split_sizes(long n) {
    SplitSizes s;
    s.val = n / 10;
    s.test = n / 5;
    s.train = n - s.val - s.test;
    return s;
}

std::vector<SplitKind> split_cohort(const Cohort& cohort, Rng& rng) {
    long n = static_cast<long>(cohort.patients.size());
    if (n < 10) throw DataError("split_cohort requires at least 10 patients, got " + std::to_string(n));
    SplitSizes s = split_sizes(n);
    std::vector<long> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0L);
    Rng srng = rng.split("split-shuffle");
    srng.shuffle(order);
    std::vector<SplitKind> assign(static_cast<size_t>(n), SplitKind::Train);
    for (long i = 0; i < s.val; ++i) assign[static_cast<size_t>(order[static_cast<size_t>(i)])] = SplitKind::Val;
    for (long i = s.val; i < s.val + s.test; ++i)
        assign[static_cast<size_t>(order[static_cast<size_t>(i)])] = SplitKind::Test;
    return assign;
}

}  // namespace medseq::cohortgen
