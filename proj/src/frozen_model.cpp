#include "einmemo/frozen_model.hpp"

#include <string>

#include "einmemo/binary_io.hpp"
#include "einmemo/errors.hpp"
#include "einmemo/toy_inpainter.hpp"

namespace einmemo {

namespace {

std::vector<uint8_t> parameter_bytes(const std::vector<ParameterView>& params) {
  ByteWriter w;
  for (const auto& p : params) {
    w.put_string(p.name);
    w.put<uint32_t>(static_cast<uint32_t>(p.rows));
    w.put<uint32_t>(static_cast<uint32_t>(p.cols));
    w.put_array<double>(p.values);
  }
  return w.bytes();
}

}  // namespace

Sha256 FrozenInpainter::weight_digest() const { return sha256(parameter_bytes(parameters())); }

std::vector<int> argmax_tokens(const Logits& logits) {
  std::vector<int> out(logits.rows);
  for (int i = 0; i < logits.rows; ++i) {
    const auto row = logits.row(i);
    int best = 0;
    for (int v = 1; v < logits.cols; ++v) {
      if (row[v] > row[best]) best = v;
    }
    out[i] = best;
  }
  return out;
}

std::vector<int> predict_tokens(const FrozenInpainter& model, const Canvas& canvas,
                                std::span<const int> positions) {
  return argmax_tokens(model.predict_logits(canvas, positions));
}

TokenGrid scatter_tokens(int side, std::span<const int> positions, std::span<const int> tokens,
                         int fill_token) {
  if (positions.size() != tokens.size()) throw UsageError("positions and tokens differ in length");
  TokenGrid g{side, std::vector<int>(static_cast<size_t>(side) * side, fill_token)};
  for (size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] < 0 || positions[i] >= side * side) throw UsageError("token position out of range");
    g.tokens[positions[i]] = tokens[i];
  }
  return g;
}

void check_canvas(const FrozenInpainter& model, const Canvas& canvas) {
  const CanvasSpec spec = model.canvas_spec();
  if (canvas.pixels.channels() != 3 || canvas.pixels.height() != spec.canvas_h() ||
      canvas.pixels.width() != spec.canvas_w()) {
    throw UsageError("canvas is " + std::to_string(canvas.pixels.height()) + "x" +
                     std::to_string(canvas.pixels.width()) + ", model expects " +
                     std::to_string(spec.canvas_h()) + "x" + std::to_string(spec.canvas_w()));
  }
}

std::unique_ptr<FrozenInpainter> load_external(const std::filesystem::path& model_dir) {
  if (!std::filesystem::is_directory(model_dir)) {
    throw DataError("model directory " + model_dir.string() + " does not exist");
  }
  return std::make_unique<PatchVqInpainter>(load_model(model_dir));
}

}  // namespace einmemo
