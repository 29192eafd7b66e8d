#pragma once

#include <algorithm>
#include <array>
#include <limits>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cxrmt/error.hpp"
#include "cxrmt/rng.hpp"

namespace cxrmt {

// Binary annotations indexed by (case, abnormality, reader). One reader may be
// designated as the original dataset labeller.
class ReaderMatrix {
 public:
  ReaderMatrix() = default;
  ReaderMatrix(std::vector<std::string> case_ids, std::vector<std::string> abnormalities,
               std::vector<std::string> readers, std::size_t original = 0)
      : case_ids_(std::move(case_ids)),
        abnormalities_(std::move(abnormalities)),
        readers_(std::move(readers)),
        original_(original),
        votes_(case_ids_.size() * abnormalities_.size() * readers_.size(), 0) {
    if (readers_.size() < 2) throw PreconditionError("ReaderMatrix: need at least two readers");
    if (original_ >= readers_.size()) throw PreconditionError("ReaderMatrix: original reader out of range");
  }

  std::size_t cases() const { return case_ids_.size(); }
  std::size_t abnormalities() const { return abnormalities_.size(); }
  std::size_t readers() const { return readers_.size(); }
  std::size_t original() const { return original_; }
  void set_original(std::size_t r) {
    if (r >= readers_.size()) throw PreconditionError("ReaderMatrix: original reader out of range");
    original_ = r;
  }

  const std::vector<std::string>& case_ids() const { return case_ids_; }
  const std::vector<std::string>& abnormality_names() const { return abnormalities_; }
  const std::vector<std::string>& reader_names() const { return readers_; }

  std::uint8_t at(std::size_t c, std::size_t a, std::size_t r) const { return votes_[index(c, a, r)]; }
  void set(std::size_t c, std::size_t a, std::size_t r, std::uint8_t v) {
    if (v > 1) throw PreconditionError("ReaderMatrix: annotations must be 0 or 1");
    votes_[index(c, a, r)] = v;
  }

  std::size_t positives(std::size_t c, std::size_t a) const {
    std::size_t n = 0;
    for (std::size_t r = 0; r < readers(); ++r) n += at(c, a, r);
    return n;
  }

  bool operator==(const ReaderMatrix&) const = default;

 private:
  std::size_t index(std::size_t c, std::size_t a, std::size_t r) const {
    return (c * abnormalities_.size() + a) * readers_.size() + r;
  }

  std::vector<std::string> case_ids_;
  std::vector<std::string> abnormalities_;
  std::vector<std::string> readers_;
  std::size_t original_ = 0;
  std::vector<std::uint8_t> votes_;
};

enum class ConfidenceCategory : std::uint8_t { high_neg = 0, low_neg = 1, low_pos = 2, high_pos = 3 };

inline const char* category_name(ConfidenceCategory c) {
  switch (c) {
    case ConfidenceCategory::high_neg: return "high_neg";
    case ConfidenceCategory::low_neg: return "low_neg";
    case ConfidenceCategory::low_pos: return "low_pos";
    case ConfidenceCategory::high_pos: return "high_pos";
  }
  return "?";
}

struct PredictiveAgreement {
  double ppa = 0.0;
  double npa = 0.0;
};

namespace detail {

inline void require_odd_readers(const ReaderMatrix& m, const char* op) {
  if (m.readers() % 2 == 0)
    throw PreconditionError(std::string(op) + ": majority vote needs an odd reader count");
}

inline void require_abnormality(const ReaderMatrix& m, std::size_t a, const char* op) {
  if (a >= m.abnormalities()) throw PreconditionError(std::string(op) + ": abnormality out of range");
}

}  // namespace detail

// ppa = |majority positive| / |any reader positive|; npa symmetric.
inline PredictiveAgreement ppa_npa(const ReaderMatrix& m, std::size_t abnormality) {
  detail::require_odd_readers(m, "ppa_npa");
  detail::require_abnormality(m, abnormality, "ppa_npa");
  const std::size_t r = m.readers();
  std::size_t maj_pos = 0, any_pos = 0, maj_neg = 0, any_neg = 0;
  for (std::size_t c = 0; c < m.cases(); ++c) {
    const std::size_t pos = m.positives(c, abnormality);
    const std::size_t neg = r - pos;
    if (2 * pos > r) ++maj_pos; else ++maj_neg;
    if (pos > 0) ++any_pos;
    if (neg > 0) ++any_neg;
  }
  if (any_pos == 0 || any_neg == 0)
    throw UndefinedMetricError("ppa_npa: no case with a positive (or negative) vote");
  return {double(maj_pos) / double(any_pos), double(maj_neg) / double(any_neg)};
}

// Fraction of original-reader positives rejected by every other reader.
inline double positive_disagreement(const ReaderMatrix& m, std::size_t abnormality) {
  detail::require_abnormality(m, abnormality, "positive_disagreement");
  if (m.readers() != 3) throw PreconditionError("positive_disagreement: defined for three readers");
  const std::size_t orig = m.original();
  std::size_t orig_pos = 0, rejected = 0;
  for (std::size_t c = 0; c < m.cases(); ++c) {
    if (!m.at(c, abnormality, orig)) continue;
    ++orig_pos;
    if (m.positives(c, abnormality) == 1) ++rejected;
  }
  if (orig_pos == 0) throw UndefinedMetricError("positive_disagreement: no original positives");
  return double(rejected) / double(orig_pos);
}

// Fleiss' kappa over the two categories present/absent.
inline double fleiss_kappa(const ReaderMatrix& m, std::size_t abnormality) {
  detail::require_abnormality(m, abnormality, "fleiss_kappa");
  if (m.cases() < 2) throw PreconditionError("fleiss_kappa: need at least two cases");
  const double r = double(m.readers());
  const double n = double(m.cases());
  double agree = 0.0, pos_total = 0.0;
  for (std::size_t c = 0; c < m.cases(); ++c) {
    const double pos = double(m.positives(c, abnormality));
    const double neg = r - pos;
    agree += (pos * pos + neg * neg - r) / (r * (r - 1.0));
    pos_total += pos;
  }
  const double p_bar = agree / n;
  const double p1 = pos_total / (n * r);
  const double p0 = 1.0 - p1;
  const double p_e = p0 * p0 + p1 * p1;
  if (p_e >= 1.0) throw UndefinedMetricError("fleiss_kappa: all votes fall in one category");
  return (p_bar - p_e) / (1.0 - p_e);
}

// Table-IV style complete-agreement counts for one abnormality.
struct AgreementCounts {
  std::size_t positive = 0;      // every reader positive
  std::size_t negative = 0;      // every reader negative
  std::size_t no_agreement = 0;  // split vote
};

inline AgreementCounts agreement_counts(const ReaderMatrix& m, std::size_t abnormality) {
  detail::require_abnormality(m, abnormality, "agreement_counts");
  AgreementCounts out;
  for (std::size_t c = 0; c < m.cases(); ++c) {
    const std::size_t pos = m.positives(c, abnormality);
    if (pos == m.readers()) ++out.positive;
    else if (pos == 0) ++out.negative;
    else ++out.no_agreement;
  }
  return out;
}

enum class RelabelStrategy { majority_vote, complete_agreement };

// Per-abnormality ground truth; labels[a][c] is meaningful only where
// retained[a][c] is set.
struct Relabeling {
  std::vector<std::vector<std::uint8_t>> labels;
  std::vector<std::vector<std::uint8_t>> retained;

  std::size_t retained_count(std::size_t a) const {
    return std::size_t(std::count(retained[a].begin(), retained[a].end(), 1));
  }
};

inline Relabeling relabel(const ReaderMatrix& m, RelabelStrategy strategy) {
  if (strategy == RelabelStrategy::majority_vote) detail::require_odd_readers(m, "relabel");
  Relabeling out;
  out.labels.assign(m.abnormalities(), std::vector<std::uint8_t>(m.cases(), 0));
  out.retained.assign(m.abnormalities(), std::vector<std::uint8_t>(m.cases(), 0));
  for (std::size_t a = 0; a < m.abnormalities(); ++a)
    for (std::size_t c = 0; c < m.cases(); ++c) {
      const std::size_t pos = m.positives(c, a);
      if (strategy == RelabelStrategy::majority_vote) {
        out.labels[a][c] = 2 * pos > m.readers() ? 1 : 0;
        out.retained[a][c] = 1;
      } else if (pos == 0 || pos == m.readers()) {
        out.labels[a][c] = pos == 0 ? 0 : 1;
        out.retained[a][c] = 1;
      }
    }
  return out;
}

// categories[c][a] from the positive-vote count among three readers.
using CategoryTable = std::vector<std::vector<ConfidenceCategory>>;

inline CategoryTable confidence_categories(const ReaderMatrix& m) {
  if (m.readers() != 3) throw PreconditionError("confidence_categories: defined for three readers");
  CategoryTable out(m.cases(), std::vector<ConfidenceCategory>(m.abnormalities()));
  for (std::size_t c = 0; c < m.cases(); ++c)
    for (std::size_t a = 0; a < m.abnormalities(); ++a)
      out[c][a] = static_cast<ConfidenceCategory>(m.positives(c, a));
  return out;
}

// One Table-IV shaped row. Metrics that are undefined for the data are NaN.
struct AgreementRow {
  std::string abnormality;
  AgreementCounts counts;
  double ppa = 0.0, npa = 0.0, pd = 0.0, kappa = 0.0;
};

inline std::vector<AgreementRow> agreement_report(const ReaderMatrix& m) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<AgreementRow> rows;
  for (std::size_t a = 0; a < m.abnormalities(); ++a) {
    AgreementRow row{m.abnormality_names()[a], agreement_counts(m, a), nan, nan, nan, nan};
    try {
      auto p = ppa_npa(m, a);
      row.ppa = p.ppa;
      row.npa = p.npa;
    } catch (const UndefinedMetricError&) {
    }
    try {
      row.pd = positive_disagreement(m, a);
    } catch (const UndefinedMetricError&) {
    }
    try {
      row.kappa = fleiss_kappa(m, a);
    } catch (const UndefinedMetricError&) {
    }
    rows.push_back(row);
  }
  return rows;
}

// Reader study with an exact planted number of cases per confidence
// category for every abnormality; which readers vote positive is random.
struct PlantedStudySpec {
  std::vector<std::string> abnormalities;
  // counts[a] = cases with 0,1,2,3 positive votes; every row sums to the case count.
  std::vector<std::array<std::size_t, 4>> counts;
  std::vector<std::string> readers{"original", "reader1", "reader2"};
  std::uint64_t seed = 0;
};

struct PlantedStudy {
  ReaderMatrix matrix;
  CategoryTable planted;
};

inline PlantedStudy planted_reader_study(const PlantedStudySpec& spec) {
  if (spec.counts.size() != spec.abnormalities.size() || spec.counts.empty())
    throw ConfigError("planted_reader_study: one count row per abnormality required");
  if (spec.readers.size() != 3) throw ConfigError("planted_reader_study: three readers required");
  const std::size_t n = std::accumulate(spec.counts[0].begin(), spec.counts[0].end(), std::size_t{0});
  for (const auto& row : spec.counts)
    if (std::accumulate(row.begin(), row.end(), std::size_t{0}) != n)
      throw ConfigError("planted_reader_study: count rows must share one case total");
  std::vector<std::string> ids(n);
  for (std::size_t c = 0; c < n; ++c) ids[c] = "case" + std::to_string(c);
  PlantedStudy out{ReaderMatrix(ids, spec.abnormalities, spec.readers, 0),
                   CategoryTable(n, std::vector<ConfidenceCategory>(spec.abnormalities.size()))};
  Rng rng(spec.seed);
  for (std::size_t a = 0; a < spec.abnormalities.size(); ++a) {
    std::vector<std::size_t> votes;
    for (std::size_t k = 0; k < 4; ++k) votes.insert(votes.end(), spec.counts[a][k], k);
    rng.shuffle(votes.begin(), votes.end());
    for (std::size_t c = 0; c < n; ++c) {
      std::array<std::size_t, 3> order{0, 1, 2};
      rng.shuffle(order.begin(), order.end());
      for (std::size_t j = 0; j < votes[c]; ++j) out.matrix.set(c, a, order[j], 1);
      out.planted[c][a] = static_cast<ConfidenceCategory>(votes[c]);
    }
  }
  return out;
}

}  // namespace cxrmt
