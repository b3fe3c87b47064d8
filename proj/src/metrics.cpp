// Copyright (c) 2026 the itervc authors
// SPDX-License-Identifier: Apache-2.0

#include "itervc/metrics.hpp"

#include <json.hpp>

namespace itervc {

EditCounts word_error_rate(const Transcript& reference, const Transcript& hypothesis) {
  if (reference.empty()) throw Error("word_error_rate: empty reference");
  const size_t n = reference.size(), m = hypothesis.size();

  // cost[i][j]: min edits aligning ref[0..i) with hyp[0..j).
  // op: 0 = diagonal (match/sub), 1 = deletion (ref token dropped),
  //     2 = insertion (extra hyp token).
  std::vector<std::vector<int>> cost(n + 1, std::vector<int>(m + 1, 0));
  std::vector<std::vector<uint8_t>> op(n + 1, std::vector<uint8_t>(m + 1, 0));
  for (size_t i = 1; i <= n; ++i) {
    cost[i][0] = static_cast<int>(i);
    op[i][0] = 1;
  }
  for (size_t j = 1; j <= m; ++j) {
    cost[0][j] = static_cast<int>(j);
    op[0][j] = 2;
  }
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      const int diag = cost[i - 1][j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      const int del = cost[i - 1][j] + 1;
      const int ins = cost[i][j - 1] + 1;
      // Tie order diag > del > ins keeps substitutions preferred over
      // insertion/deletion pairs.
      int best = diag;
      uint8_t o = 0;
      if (del < best) {
        best = del;
        o = 1;
      }
      if (ins < best) {
        best = ins;
        o = 2;
      }
      cost[i][j] = best;
      op[i][j] = o;
    }
  }

  EditCounts c;
  c.n_ref = static_cast<int>(n);
  size_t i = n, j = m;
  while (i > 0 || j > 0) {
    switch (op[i][j]) {
      case 0:
        if (reference[i - 1] != hypothesis[j - 1]) ++c.substitutions;
        --i;
        --j;
        break;
      case 1:
        ++c.deletions;
        --i;
        break;
      default:
        ++c.insertions;
        --j;
        break;
    }
  }
  c.wer = static_cast<double>(c.substitutions + c.insertions + c.deletions) / static_cast<double>(n);
  return c;
}

void WerReport::add(const std::string& id, const EditCounts& c) {
  per_utterance.push_back({id, c});
  substitutions += c.substitutions;
  insertions += c.insertions;
  deletions += c.deletions;
  n_ref_words += c.n_ref;
  n_utterances += 1;
  wer = static_cast<double>(substitutions + insertions + deletions) / static_cast<double>(n_ref_words);
}

std::string to_json_line(const WerRecord& r) {
  nlohmann::json j;
  j["model_id"] = r.model_id;
  j["manifest_tag"] = r.manifest_tag;
  j["wer"] = r.wer;
  j["n_words"] = r.n_words;
  j["n_utts"] = r.n_utts;
  if (r.step >= 0) j["step"] = r.step;
  return j.dump();
}

}  // namespace itervc
