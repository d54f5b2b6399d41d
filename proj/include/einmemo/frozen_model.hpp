#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "einmemo/canvas.hpp"
#include "einmemo/digest.hpp"
#include "einmemo/image.hpp"

namespace einmemo {

struct Codebook {
  int size = 0;
  int dim = 0;
  std::vector<double> embeddings;  // size x dim, row-major
};

struct TokenGrid {
  int side = 0;
  std::vector<int> tokens;  // side x side, row-major

  int at(int row, int col) const { return tokens[static_cast<size_t>(row) * side + col]; }
  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

// Score matrix: one row of |V| scores per requested position.
struct Logits {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  Logits() = default;
  Logits(int r, int c) : rows(r), cols(c), values(static_cast<size_t>(r) * c, 0.0) {}
  std::span<double> row(int i) { return {values.data() + static_cast<size_t>(i) * cols, static_cast<size_t>(cols)}; }
  std::span<const double> row(int i) const {
    return {values.data() + static_cast<size_t>(i) * cols, static_cast<size_t>(cols)};
  }
};

// Named, read-only view of one weight tensor.
struct ParameterView {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::span<const double> values;
  bool trainable = false;
};

// The frozen vision model: token predictor g, tokenizer E, decoder f and
// codebook V. Implementations are immutable once constructed.
class FrozenInpainter {
 public:
  // Maps logits to d(loss)/d(logits); used by backprop_to_canvas.
  using Upstream = std::function<Logits(const Logits&)>;

  virtual ~FrozenInpainter() = default;

  virtual std::string name() const = 0;
  virtual const Codebook& codebook() const = 0;
  virtual int token_grid_side() const = 0;
  virtual CanvasSpec canvas_spec() const = 0;

  // Scores for each requested position; requested positions are masked out
  // of the model input.
  virtual Logits predict_logits(const Canvas& canvas, std::span<const int> positions) const = 0;
  // One forward and backward pass. Returns d(loss)/d(canvas pixels) where
  // loss is defined through `upstream`; `logits_out` receives the forward scores.
  virtual Image backprop_to_canvas(const Canvas& canvas, std::span<const int> positions,
                                   const Upstream& upstream, Logits* logits_out = nullptr) const = 0;
  // Per-position codebook scores of the tokenizer (negative squared distance).
  virtual Logits token_scores(const Canvas& canvas) const = 0;
  virtual TokenGrid encode_tokens(const Canvas& canvas) const = 0;
  // Full canvas image in [0, 1].
  virtual Image decode(const TokenGrid& tokens) const = 0;

  virtual std::vector<ParameterView> parameters() const = 0;

  // SHA-256 over all parameter names, shapes and values.
  Sha256 weight_digest() const;
};

// Argmax per position, ties to the lowest token id.
std::vector<int> argmax_tokens(const Logits& logits);
std::vector<int> predict_tokens(const FrozenInpainter& model, const Canvas& canvas,
                                std::span<const int> positions);

// Grid with `tokens` written at `positions` and `fill_token` elsewhere.
TokenGrid scatter_tokens(int side, std::span<const int> positions, std::span<const int> tokens,
                         int fill_token = 0);

void check_canvas(const FrozenInpainter& model, const Canvas& canvas);

// Loads a model directory (descriptor.json + weights.bin) written by
// save_model or exported by an external tool in the same format.
std::unique_ptr<FrozenInpainter> load_external(const std::filesystem::path& model_dir);

}  // namespace einmemo
