#pragma once

#include <map>
#include <string>
#include <vector>

#include "veritune/generation.hpp"
#include "veritune/types.hpp"

namespace veritune {

struct CorpusOptions {
  std::size_t size = 2000;
  double contradiction_rate = 0.5;  // fraction of refuting records
  double distractor_rate = 0.35;    // chance of each optional evidence line (up to two)
  double val_fraction = 0.1;
  double test_fraction = 0.1;

  void validate() const;
};

// Deterministic synthetic claim/evidence corpus over a closed grammar:
// single-sentence claims about civic buildings with one numeric field and
// one capitalized place name. Refuting records are counterfactual edits of
// a true fact (number or place swapped) and carry tips naming the edit;
// supporting records restate the fact. Splits are assigned by shuffling
// with the same seed, at (1 - val - test) / val / test proportions.
std::vector<ClaimRecord> synthesize_corpus(std::uint64_t seed, const CorpusOptions& opts);

// Merges externally supplied counterfactual records into a base corpus.
// Each incoming record must be refuting, counterfactual, tipped, and carry
// an id unused by the base; violations raise DataError.
std::vector<ClaimRecord> ingest_counterfactual(const std::vector<ClaimRecord>& base,
                                               const std::vector<ClaimRecord>& counterfactual);

// Count of bare-setting samples whose parsed answer matches the record's
// gold label, looking at sample indices [0, k). Throws DataError if fewer
// than k bare samples are present.
int difficulty_weight(const ClaimRecord& record, const std::vector<GenerationSample>& bare,
                      int k);

// Pairs drawn for a record: max(n_min, ceil(n_base * w / k)).
int sample_count(int w, int k, int n_min, int n_base);

struct PairingOptions {
  bool flat_sampling = false;       // every record gets n_min pairs
  bool no_counterfactual = false;   // drop counterfactual records entirely
  bool tips_in_prompt = false;      // carry TIPS lines into training prompts
  bool validity_filter = true;      // discard samples invalid for their setting
};

struct PairingStats {
  int records_in = 0;
  int records_paired = 0;
  int records_skipped = 0;  // empty chosen or rejected pool
  int pairs_out = 0;
};

// Builds preference pairs for each record from its cached generations.
// Chosen candidates parse to the gold answer and come from the bare setting
// or the hint setting aligned with gold (plus the tips setting); rejected
// candidates parse to the opposite answer and come from the bare setting or
// the hint setting opposed to gold. Draws are seeded per record id, so the
// result is independent of record order. Records with an empty pool on
// either side contribute nothing.
std::vector<PreferencePair> build_pairs(
    const std::vector<ClaimRecord>& records,
    const std::map<std::string, std::vector<GenerationSample>>& samples_by_record,
    const Hyperparams& hyper, std::uint64_t seed, const PairingOptions& opts,
    PairingStats* stats = nullptr);

// Supervision targets for the label-only training variant: the bare prompt
// paired with just the gold answer token.
struct LabelTarget {
  std::string record_id;
  std::string prompt;
  std::string target;  // "Yes" or "No"
};

std::vector<LabelTarget> build_label_only_targets(const std::vector<ClaimRecord>& records);

}  // namespace veritune
