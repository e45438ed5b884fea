#pragma once

// Grid search over (lambda1, lambda2) maximizing validation corpus BLEU,
// with optional local refinement and heatmap export.

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ilmf/beam.hpp"
#include "ilmf/corpus.hpp"
#include "ilmf/metrics.hpp"

namespace ilmf {

struct GridSpec {
  std::vector<double> lambda1_values;
  std::vector<double> lambda2_values;
  // Extra shallow-fusion-only weights evaluated on the lambda2 = 0 row; the
  // coarse 0.1 grid misses small SF optima otherwise.
  std::vector<double> sf_extra_lambda1 = {0.05, 0.15};
  struct Refine {
    double radius = 0.1;
    double step = 0.05;
  };
  std::optional<Refine> refine;

  static GridSpec defaults() {
    GridSpec s;
    for (int i = 0; i <= 6; ++i) {
      s.lambda1_values.push_back(0.1 * i);
      s.lambda2_values.push_back(0.1 * i);
    }
    return s;
  }

  void validate() const {
    for (const auto* axis : {&lambda1_values, &lambda2_values}) {
      if (axis->empty()) throw ContractError("grid axis is empty");
      for (size_t i = 0; i < axis->size(); ++i) {
        if ((*axis)[i] < 0.0) throw ContractError("grid weights must be nonnegative");
        if (i > 0 && (*axis)[i] <= (*axis)[i - 1])
          throw ContractError("grid axis values must be ascending and distinct");
      }
      if ((*axis)[0] != 0.0) throw ContractError("grid axis must contain 0.0");
    }
  }
};

struct GridCell {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double bleu = 0.0;
};

struct GridResult {
  std::vector<GridCell> cells;
  GridCell best;
};

using CellEvaluator = std::function<double(double lambda1, double lambda2)>;

namespace detail {

inline bool better_cell(const GridCell& a, const GridCell& b) {
  if (a.bleu != b.bleu) return a.bleu > b.bleu;
  if (a.lambda2 != b.lambda2) return a.lambda2 < b.lambda2;  // ties: smaller lambda2
  return a.lambda1 < b.lambda1;                              // then smaller lambda1
}

inline void sort_cells(std::vector<GridCell>& cells) {
  std::sort(cells.begin(), cells.end(), [](const GridCell& a, const GridCell& b) {
    if (a.lambda2 != b.lambda2) return a.lambda2 < b.lambda2;
    return a.lambda1 < b.lambda1;
  });
}

inline bool has_cell(const std::vector<GridCell>& cells, double l1, double l2) {
  for (const GridCell& c : cells)
    if (std::abs(c.lambda1 - l1) < 1e-9 && std::abs(c.lambda2 - l2) < 1e-9) return true;
  return false;
}

inline GridCell best_of(const std::vector<GridCell>& cells) {
  GridCell best = cells.front();
  for (const GridCell& c : cells)
    if (better_cell(c, best)) best = c;
  return best;
}

}  // namespace detail

// Evaluate every cell of the grid (cells are deduplicated; evaluation order
// is sorted by (lambda2, lambda1) and deterministic).
inline GridResult grid_search_cells(const GridSpec& spec, const CellEvaluator& evaluate) {
  spec.validate();
  std::vector<GridCell> todo;
  for (double l2 : spec.lambda2_values)
    for (double l1 : spec.lambda1_values)
      todo.push_back({l1, l2, 0.0});
  for (double l1 : spec.sf_extra_lambda1)
    if (!detail::has_cell(todo, l1, 0.0)) todo.push_back({l1, 0.0, 0.0});
  detail::sort_cells(todo);

  GridResult result;
  for (GridCell& cell : todo) {
    cell.bleu = evaluate(cell.lambda1, cell.lambda2);
    result.cells.push_back(cell);
  }
  result.best = detail::best_of(result.cells);
  return result;
}

// Re-evaluate a finer grid of step `finer_step` within +-radius of the best
// cell (clamped at zero), merge with the existing cells, recompute the best.
inline GridResult refine(const GridResult& result, const CellEvaluator& evaluate, double radius,
                         double finer_step) {
  if (result.cells.empty()) throw ContractError("refine: grid result has no cells");
  if (radius <= 0.0 || finer_step <= 0.0) return result;
  GridResult out = result;
  auto values_around = [&](double center) {
    std::vector<double> vals;
    const double lo = std::max(0.0, center - radius);
    for (double v = lo; v <= center + radius + 1e-12; v += finer_step)
      vals.push_back(std::round(v / finer_step) * finer_step);
    return vals;
  };
  for (double l2 : values_around(result.best.lambda2))
    for (double l1 : values_around(result.best.lambda1)) {
      if (detail::has_cell(out.cells, l1, l2)) continue;
      out.cells.push_back({l1, l2, evaluate(l1, l2)});
    }
  detail::sort_cells(out.cells);
  out.best = detail::best_of(out.cells);
  return out;
}

// CSV rows "lambda1,lambda2,bleu" sorted by (lambda2, lambda1); values keep
// full precision so a parse-back reproduces the result exactly.
inline void export_heatmap_csv(const GridResult& result, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write heatmap to " + path);
  std::vector<GridCell> cells = result.cells;
  detail::sort_cells(cells);
  os << std::setprecision(17);
  for (const GridCell& c : cells) os << c.lambda1 << "," << c.lambda2 << "," << c.bleu << "\n";
}

inline std::vector<GridCell> parse_heatmap_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read heatmap from " + path);
  std::vector<GridCell> cells;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    GridCell c;
    std::istringstream row(line);
    char comma1 = 0, comma2 = 0;
    if (!(row >> c.lambda1 >> comma1 >> c.lambda2 >> comma2 >> c.bleu) || comma1 != ',' ||
        comma2 != ',')
      throw FormatError("malformed heatmap row: '" + line + "'");
    cells.push_back(c);
  }
  return cells;
}

// ---- weights file ----------------------------------------------------------------

struct TunedWeights {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  std::string variant = "none";
};

inline void save_weights(const TunedWeights& w, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write weights to " + path);
  os << std::setprecision(17) << "lambda1=" << w.lambda1 << " lambda2=" << w.lambda2
     << " variant=" << w.variant << "\n";
}

inline TunedWeights load_weights(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read weights from " + path);
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  TunedWeights w;
  std::istringstream ss(content);
  std::string field;
  bool saw1 = false, saw2 = false;
  while (ss >> field) {
    const size_t eq = field.find('=');
    if (eq == std::string::npos) throw FormatError("malformed weights file " + path);
    const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
    if (key == "lambda1") {
      w.lambda1 = std::stod(val);
      saw1 = true;
    } else if (key == "lambda2") {
      w.lambda2 = std::stod(val);
      saw2 = true;
    } else if (key == "variant") {
      w.variant = val;
    }
  }
  if (!saw1 || !saw2) throw FormatError("weights file " + path + " is missing lambda values");
  return w;
}

// ---- decoding-backed evaluator ------------------------------------------------------

// Shared context for grid search and refinement over a real validation set.
struct GridDecodeContext {
  const ParallelCorpus* valid = nullptr;
  const TransformerModel* mt = nullptr;
  const TransformerModel* lm = nullptr;
  std::optional<IlmVariant> variant;
  BeamConfig beam;
  const BpeModel* bpe = nullptr;
  const Vocabulary* vocab = nullptr;
  int threads = 1;

  CellEvaluator evaluator() const {
    if (!valid || valid->pairs.empty()) throw InputError("grid search: empty validation corpus");
    auto refs = std::make_shared<std::vector<std::string>>();
    auto sources = std::make_shared<std::vector<std::vector<int>>>();
    for (const auto& [f, e] : valid->pairs) {
      sources->push_back(f);
      refs->push_back(decode_ids(*bpe, *vocab, e));
    }
    return [this, refs, sources](double l1, double l2) {
      FusionWeights w;
      w.lambda1 = l1;
      w.lambda2 = l2;
      if (l2 > 0.0) {
        if (!variant) throw ContractError("grid search: lambda2 > 0 requires an ILM variant");
        w.variant = variant;
      }
      const auto hyps = translate_corpus(*sources, *mt, lm, w, beam, threads);
      std::vector<std::string> texts;
      texts.reserve(hyps.size());
      for (const Hypothesis& h : hyps) {
        std::vector<int> ids = h.tokens;
        if (!ids.empty() && ids.back() == kEosId) ids.pop_back();
        texts.push_back(decode_ids(*bpe, *vocab, ids));
      }
      return corpus_bleu(texts, *refs).bleu_percent;
    };
  }
};

// Full grid search over the validation set: decode every cell, score corpus
// BLEU, pick the argmax (ties prefer smaller lambda2, then smaller lambda1),
// then optionally refine around it.
inline GridResult grid_search(const GridDecodeContext& ctx, const GridSpec& spec) {
  const CellEvaluator eval = ctx.evaluator();
  GridResult result = grid_search_cells(spec, eval);
  if (spec.refine) result = refine(result, eval, spec.refine->radius, spec.refine->step);
  return result;
}

}  // namespace ilmf
