#include "einmemo/toy_inpainter.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "einmemo/binary_io.hpp"
#include "einmemo/errors.hpp"
#include "einmemo/optim.hpp"
#include "einmemo/rng.hpp"

namespace einmemo {

// ---------------------------------------------------------------------------
// Configuration

void PatchVqConfig::validate() const {
  canvas().validate();
  if (grid_side <= 0 || grid_side % 2 != 0) throw UsageError("token grid side must be positive and even");
  if (canvas_size() % grid_side != 0) {
    throw UsageError("token grid side " + std::to_string(grid_side) + " does not divide canvas size " +
                     std::to_string(canvas_size()));
  }
  if (codebook_size < 2) throw UsageError("codebook needs at least 2 entries");
  if (code_dim <= 0 || tokenizer_hidden <= 0 || embed_dim <= 0 || head_hidden <= 0) {
    throw UsageError("layer widths must be positive");
  }
}

void to_json(nlohmann::json& j, const PatchVqConfig& c) {
  j = nlohmann::json{{"cell", c.cell},
                     {"gap", c.gap},
                     {"grid_side", c.grid_side},
                     {"codebook_size", c.codebook_size},
                     {"code_dim", c.code_dim},
                     {"tokenizer_hidden", c.tokenizer_hidden},
                     {"embed_dim", c.embed_dim},
                     {"head_hidden", c.head_hidden}};
}

void from_json(const nlohmann::json& j, PatchVqConfig& c) {
  j.at("cell").get_to(c.cell);
  j.at("gap").get_to(c.gap);
  j.at("grid_side").get_to(c.grid_side);
  j.at("codebook_size").get_to(c.codebook_size);
  j.at("code_dim").get_to(c.code_dim);
  j.at("tokenizer_hidden").get_to(c.tokenizer_hidden);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("head_hidden").get_to(c.head_hidden);
}

void to_json(nlohmann::json& j, const ToyTrainConfig& c) {
  j = nlohmann::json{{"arch", c.arch},
                     {"seed", c.seed},
                     {"tokenizer_epochs", c.tokenizer_epochs},
                     {"tokenizer_patches_per_epoch", c.tokenizer_patches_per_epoch},
                     {"tokenizer_batch", c.tokenizer_batch},
                     {"tokenizer_lr", c.tokenizer_lr},
                     {"commitment", c.commitment},
                     {"consolidation_iters", c.consolidation_iters},
                     {"max_reconstruction_mae", c.max_reconstruction_mae},
                     {"predictor_epochs", c.predictor_epochs},
                     {"predictor_batch", c.predictor_batch},
                     {"predictor_lr", c.predictor_lr}};
}

void from_json(const nlohmann::json& j, ToyTrainConfig& c) {
  j.at("arch").get_to(c.arch);
  j.at("seed").get_to(c.seed);
  j.at("tokenizer_epochs").get_to(c.tokenizer_epochs);
  j.at("tokenizer_patches_per_epoch").get_to(c.tokenizer_patches_per_epoch);
  j.at("tokenizer_batch").get_to(c.tokenizer_batch);
  j.at("tokenizer_lr").get_to(c.tokenizer_lr);
  j.at("commitment").get_to(c.commitment);
  j.at("consolidation_iters").get_to(c.consolidation_iters);
  j.at("max_reconstruction_mae").get_to(c.max_reconstruction_mae);
  j.at("predictor_epochs").get_to(c.predictor_epochs);
  j.at("predictor_batch").get_to(c.predictor_batch);
  j.at("predictor_lr").get_to(c.predictor_lr);
}

PatchVqWeights PatchVqWeights::zeros(const PatchVqConfig& c) {
  const int d = c.patch_dim(), h = c.embed_dim, th = c.tokenizer_hidden, hh = c.head_hidden;
  const int v = c.codebook_size, k = c.code_dim;
  PatchVqWeights w;
  w.enc1_w = Mat::Zero(th, d);
  w.enc1_b = Mat::Zero(1, th);
  w.enc2_w = Mat::Zero(k, th);
  w.enc2_b = Mat::Zero(1, k);
  w.codebook = Mat::Zero(v, k);
  w.dec1_w = Mat::Zero(th, k);
  w.dec1_b = Mat::Zero(1, th);
  w.dec2_w = Mat::Zero(d, th);
  w.dec2_b = Mat::Zero(1, d);
  w.embed_w = Mat::Zero(h, d);
  w.embed_b = Mat::Zero(1, h);
  w.mask_token = Mat::Zero(1, h);
  w.pos = Mat::Zero(c.tokens(), h);
  w.head1_w = Mat::Zero(hh, 6 * h);
  w.head1_b = Mat::Zero(1, hh);
  w.head_pos = Mat::Zero(c.half() * c.half(), hh);
  w.head2_w = Mat::Zero(v, hh);
  w.head2_b = Mat::Zero(1, v);
  return w;
}

// ---------------------------------------------------------------------------
// Patch layout

namespace {

// Row n = patch (n / grid, n % grid); columns ordered (channel, y, x).
Mat patchify(const Image& img, int grid, int patch) {
  Mat x(grid * grid, 3 * patch * patch);
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      double* row = x.row(r * grid + c).data();
      for (int ch = 0; ch < 3; ++ch) {
        for (int py = 0; py < patch; ++py) {
          const double* src = &img.at(ch, r * patch + py, c * patch);
          std::copy(src, src + patch, row + (ch * patch + py) * patch);
        }
      }
    }
  }
  return x;
}

Image unpatchify(const Mat& x, int grid, int patch) {
  Image img(3, grid * patch, grid * patch);
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      const double* row = x.row(r * grid + c).data();
      for (int ch = 0; ch < 3; ++ch) {
        for (int py = 0; py < patch; ++py) {
          const double* src = row + (ch * patch + py) * patch;
          std::copy(src, src + patch, &img.at(ch, r * patch + py, c * patch));
        }
      }
    }
  }
  return img;
}

Mat relu(const Mat& m) { return m.cwiseMax(0.0); }

// x * sigmoid(x); smooth, so finite differences through the predictor are exact to O(eps^2).
Mat silu(const Mat& m) {
  return m.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
}

Mat silu_grad(const Mat& m) {
  return m.unaryExpr([](double v) {
    const double s = 1.0 / (1.0 + std::exp(-v));
    return s * (1.0 + v * (1.0 - s));
  });
}

// Tokenizer ------------------------------------------------------------------

struct EncodeCache {
  Mat h1;  // post-relu hidden
  Mat z;   // pre-quantization codes
};

EncodeCache encode_patches(const PatchVqWeights& w, const Mat& x) {
  EncodeCache e;
  e.h1 = relu((x * w.enc1_w.transpose()).rowwise() + w.enc1_b.row(0));
  e.z = (e.h1 * w.enc2_w.transpose()).rowwise() + w.enc2_b.row(0);
  return e;
}

// Negative squared distance of each code row to every codebook entry.
Mat code_scores(const Mat& codebook, const Mat& z) {
  const Eigen::VectorXd cn = codebook.rowwise().squaredNorm();
  const Eigen::VectorXd zn = z.rowwise().squaredNorm();
  Mat s = 2.0 * (z * codebook.transpose());
  s.colwise() -= zn;
  s.rowwise() -= cn.transpose();
  return s;
}

std::vector<int> nearest_codes(const Mat& codebook, const Mat& z) {
  const Mat s = code_scores(codebook, z);
  std::vector<int> out(z.rows());
  for (int i = 0; i < s.rows(); ++i) {
    int best = 0;
    for (int v = 1; v < s.cols(); ++v) {
      if (s(i, v) > s(i, best)) best = v;
    }
    out[i] = best;
  }
  return out;
}

struct DecodeCache {
  Mat g1;   // post-relu hidden
  Mat out;  // sigmoid output
};

DecodeCache decode_codes(const PatchVqWeights& w, const Mat& codes) {
  DecodeCache d;
  d.g1 = relu((codes * w.dec1_w.transpose()).rowwise() + w.dec1_b.row(0));
  Mat pre = (d.g1 * w.dec2_w.transpose()).rowwise() + w.dec2_b.row(0);
  d.out = pre.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  return d;
}

Mat gather_codes(const Mat& codebook, const std::vector<int>& idx) {
  Mat out(static_cast<int>(idx.size()), codebook.cols());
  for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<int>(i)) = codebook.row(idx[i]);
  return out;
}

// Predictor ------------------------------------------------------------------

struct Layout {
  int grid, half;
  explicit Layout(const PatchVqConfig& c) : grid(c.grid_side), half(c.half()) {}
  int local(int pos) const { return (pos / grid % half) * half + (pos % grid % half); }
  int query(int pos) const { return (half + pos / grid % half) * grid + pos % grid % half; }
  int pair_image(int pos) const { return (pos / grid % half) * grid + pos % grid % half; }
  int pair_label(int pos) const { return (pos / grid % half) * grid + half + pos % grid % half; }
  bool top(int n) const { return n / grid < half; }
  bool bottom_left(int n) const { return n / grid >= half && n % grid < half; }
  // 3x3 neighborhood of a bottom-left patch, clipped to the quadrant.
  std::vector<int> neighbors(int q) const {
    std::vector<int> out;
    const int r = q / grid, c = q % grid;
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) {
        const int rr = r + dr, cc = c + dc;
        if (rr >= half && rr < grid && cc >= 0 && cc < half) out.push_back(rr * grid + cc);
      }
    }
    return out;
  }
};

struct PredictorCache {
  std::vector<int> positions;
  std::vector<int> unmasked;  // patch rows fed through the embedding
  Mat xu;                     // their pixels
  Mat e;                      // pre-activation embeddings, all patches
  Mat t;                      // silu(e)
  Mat f;                      // per-position features
  Mat u_pre;                  // head hidden pre-activation
  Mat u;                      // silu(u_pre)
  Mat s;                      // logits
};

PredictorCache predictor_forward(const PatchVqWeights& w, const PatchVqConfig& cfg, const Mat& x,
                                 std::span<const int> positions) {
  const Layout lay(cfg);
  const int n = cfg.tokens(), h = cfg.embed_dim;
  PredictorCache k;
  k.positions.assign(positions.begin(), positions.end());
  std::vector<char> masked(n, 0);
  for (int p : positions) {
    if (p < 0 || p >= n) throw UsageError("token position " + std::to_string(p) + " out of range");
    masked[p] = 1;
  }
  for (int i = 0; i < n; ++i) {
    if (!masked[i]) k.unmasked.push_back(i);
  }
  k.xu.resize(static_cast<int>(k.unmasked.size()), x.cols());
  for (size_t i = 0; i < k.unmasked.size(); ++i) k.xu.row(static_cast<int>(i)) = x.row(k.unmasked[i]);
  const Mat eu = (k.xu * w.embed_w.transpose()).rowwise() + w.embed_b.row(0);
  k.e = w.pos;
  for (size_t i = 0; i < k.unmasked.size(); ++i) k.e.row(k.unmasked[i]) += eu.row(static_cast<int>(i));
  for (int i = 0; i < n; ++i) {
    if (masked[i]) k.e.row(i) += w.mask_token.row(0);
  }
  k.t = silu(k.e);

  Eigen::RowVectorXd g_top = Eigen::RowVectorXd::Zero(h), g_bl = Eigen::RowVectorXd::Zero(h);
  int n_top = 0, n_bl = 0;
  for (int i = 0; i < n; ++i) {
    if (lay.top(i)) g_top += k.t.row(i), ++n_top;
    if (lay.bottom_left(i)) g_bl += k.t.row(i), ++n_bl;
  }
  g_top /= n_top;
  g_bl /= n_bl;

  const int l = static_cast<int>(positions.size());
  k.f.resize(l, 6 * h);
  for (int i = 0; i < l; ++i) {
    const int p = positions[i];
    const int q = lay.query(p);
    Eigen::RowVectorXd nb = Eigen::RowVectorXd::Zero(h);
    const auto nbrs = lay.neighbors(q);
    for (int m : nbrs) nb += k.t.row(m);
    nb /= static_cast<double>(nbrs.size());
    k.f.row(i) << k.t.row(q), nb, k.t.row(lay.pair_image(p)), k.t.row(lay.pair_label(p)), g_top, g_bl;
  }
  Mat pre = (k.f * w.head1_w.transpose()).rowwise() + w.head1_b.row(0);
  for (int i = 0; i < l; ++i) pre.row(i) += w.head_pos.row(lay.local(positions[i]));
  k.u = silu(pre);
  k.u_pre = std::move(pre);
  k.s = (k.u * w.head2_w.transpose()).rowwise() + w.head2_b.row(0);
  return k;
}

struct PredictorGrads {
  Mat embed_w, embed_b, mask_token, pos, head1_w, head1_b, head_pos, head2_w, head2_b;

  explicit PredictorGrads(const PatchVqWeights& w)
      : embed_w(Mat::Zero(w.embed_w.rows(), w.embed_w.cols())),
        embed_b(Mat::Zero(1, w.embed_b.cols())),
        mask_token(Mat::Zero(1, w.mask_token.cols())),
        pos(Mat::Zero(w.pos.rows(), w.pos.cols())),
        head1_w(Mat::Zero(w.head1_w.rows(), w.head1_w.cols())),
        head1_b(Mat::Zero(1, w.head1_b.cols())),
        head_pos(Mat::Zero(w.head_pos.rows(), w.head_pos.cols())),
        head2_w(Mat::Zero(w.head2_w.rows(), w.head2_w.cols())),
        head2_b(Mat::Zero(1, w.head2_b.cols())) {}
};

// Backward from d(loss)/d(logits). Accumulates weight gradients into `g`
// and/or writes d(loss)/d(unmasked patch pixels) into `dxu`.
void predictor_backward(const PatchVqWeights& w, const PatchVqConfig& cfg, const PredictorCache& k,
                        const Mat& ds, PredictorGrads* g, Mat* dxu) {
  const Layout lay(cfg);
  const int n = cfg.tokens(), h = cfg.embed_dim;
  const int l = static_cast<int>(k.positions.size());

  Mat du = ds * w.head2_w;
  du = du.cwiseProduct(silu_grad(k.u_pre));
  if (g) {
    g->head2_w.noalias() += ds.transpose() * k.u;
    g->head2_b += ds.colwise().sum();
    g->head1_w.noalias() += du.transpose() * k.f;
    g->head1_b += du.colwise().sum();
    for (int i = 0; i < l; ++i) g->head_pos.row(lay.local(k.positions[i])) += du.row(i);
  }
  const Mat df = du * w.head1_w;

  Mat dt = Mat::Zero(n, h);
  Eigen::RowVectorXd dg_top = Eigen::RowVectorXd::Zero(h), dg_bl = Eigen::RowVectorXd::Zero(h);
  for (int i = 0; i < l; ++i) {
    const int p = k.positions[i];
    const int q = lay.query(p);
    dt.row(q) += df.row(i).segment(0, h);
    const auto nbrs = lay.neighbors(q);
    const Eigen::RowVectorXd dnb = df.row(i).segment(h, h) / static_cast<double>(nbrs.size());
    for (int m : nbrs) dt.row(m) += dnb;
    dt.row(lay.pair_image(p)) += df.row(i).segment(2 * h, h);
    dt.row(lay.pair_label(p)) += df.row(i).segment(3 * h, h);
    dg_top += df.row(i).segment(4 * h, h);
    dg_bl += df.row(i).segment(5 * h, h);
  }
  int n_top = 0, n_bl = 0;
  for (int i = 0; i < n; ++i) {
    n_top += lay.top(i);
    n_bl += lay.bottom_left(i);
  }
  dg_top /= n_top;
  dg_bl /= n_bl;
  for (int i = 0; i < n; ++i) {
    if (lay.top(i)) dt.row(i) += dg_top;
    if (lay.bottom_left(i)) dt.row(i) += dg_bl;
  }
  const Mat de = dt.cwiseProduct(silu_grad(k.e));

  Mat deu(static_cast<int>(k.unmasked.size()), h);
  for (size_t i = 0; i < k.unmasked.size(); ++i) deu.row(static_cast<int>(i)) = de.row(k.unmasked[i]);
  if (g) {
    g->pos += de;
    std::vector<char> is_unmasked(n, 0);
    for (int i : k.unmasked) is_unmasked[i] = 1;
    for (int i = 0; i < n; ++i) {
      if (!is_unmasked[i]) g->mask_token += de.row(i);
    }
    g->embed_w.noalias() += deu.transpose() * k.xu;
    g->embed_b += deu.colwise().sum();
  }
  if (dxu) *dxu = deu * w.embed_w;
}

Logits to_logits(const Mat& s) {
  Logits out(static_cast<int>(s.rows()), static_cast<int>(s.cols()));
  std::copy(s.data(), s.data() + s.size(), out.values.begin());
  return out;
}

Mat from_logits(const Logits& l) {
  Mat m(l.rows, l.cols);
  std::copy(l.values.begin(), l.values.end(), m.data());
  return m;
}

// Mean cross-entropy over rows; writes d(loss)/d(logits) into ds.
double cross_entropy(const Mat& s, const std::vector<int>& targets, Mat* ds) {
  double loss = 0.0;
  if (ds) ds->resize(s.rows(), s.cols());
  for (int i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    const Eigen::RowVectorXd ex = (s.row(i).array() - mx).exp().matrix();
    const double z = ex.sum();
    loss += std::log(z) + mx - s(i, targets[i]);
    if (ds) {
      ds->row(i) = ex / z;
      (*ds)(i, targets[i]) -= 1.0;
    }
  }
  if (ds) *ds /= static_cast<double>(s.rows());
  return loss / s.rows();
}

}  // namespace

// ---------------------------------------------------------------------------
// PatchVqInpainter

PatchVqInpainter::PatchVqInpainter(PatchVqConfig config, PatchVqWeights weights, double reconstruction_threshold)
    : config_(config), weights_(std::move(weights)), reconstruction_threshold_(reconstruction_threshold) {
  config_.validate();
  const PatchVqWeights ref = PatchVqWeights::zeros(config_);
  std::vector<std::pair<int, int>> shapes;
  ref.for_each([&](const char*, const Mat& m) { shapes.emplace_back(m.rows(), m.cols()); });
  size_t i = 0;
  weights_.for_each([&](const char* name, const Mat& m) {
    if (m.rows() != shapes[i].first || m.cols() != shapes[i].second) {
      throw DataError(std::string("weight block ") + name + " has the wrong shape");
    }
    if (!m.allFinite()) throw DataError(std::string("weight block ") + name + " is not finite");
    ++i;
  });
  codebook_.size = config_.codebook_size;
  codebook_.dim = config_.code_dim;
  codebook_.embeddings.assign(weights_.codebook.data(), weights_.codebook.data() + weights_.codebook.size());
}

Logits PatchVqInpainter::predict_logits(const Canvas& canvas, std::span<const int> positions) const {
  check_canvas(*this, canvas);
  const Mat x = patchify(canvas.pixels, config_.grid_side, config_.patch());
  return to_logits(predictor_forward(weights_, config_, x, positions).s);
}

Image PatchVqInpainter::backprop_to_canvas(const Canvas& canvas, std::span<const int> positions,
                                           const Upstream& upstream, Logits* logits_out) const {
  check_canvas(*this, canvas);
  const Mat x = patchify(canvas.pixels, config_.grid_side, config_.patch());
  const PredictorCache k = predictor_forward(weights_, config_, x, positions);
  const Logits logits = to_logits(k.s);
  const Logits grad = upstream(logits);
  if (grad.rows != logits.rows || grad.cols != logits.cols) throw UsageError("upstream gradient has the wrong shape");
  Mat dxu;
  predictor_backward(weights_, config_, k, from_logits(grad), nullptr, &dxu);
  Mat dx = Mat::Zero(x.rows(), x.cols());
  for (size_t i = 0; i < k.unmasked.size(); ++i) dx.row(k.unmasked[i]) = dxu.row(static_cast<int>(i));
  if (logits_out) *logits_out = logits;
  return unpatchify(dx, config_.grid_side, config_.patch());
}

Logits PatchVqInpainter::token_scores(const Canvas& canvas) const {
  check_canvas(*this, canvas);
  const Mat x = patchify(canvas.pixels, config_.grid_side, config_.patch());
  return to_logits(code_scores(weights_.codebook, encode_patches(weights_, x).z));
}

TokenGrid PatchVqInpainter::encode_tokens(const Canvas& canvas) const {
  return TokenGrid{config_.grid_side, argmax_tokens(token_scores(canvas))};
}

Image PatchVqInpainter::decode(const TokenGrid& tokens) const {
  if (tokens.side != config_.grid_side || static_cast<int>(tokens.tokens.size()) != config_.tokens()) {
    throw UsageError("token grid has the wrong size");
  }
  for (int t : tokens.tokens) {
    if (t < 0 || t >= config_.codebook_size) throw UsageError("invalid token id " + std::to_string(t));
  }
  const DecodeCache d = decode_codes(weights_, gather_codes(weights_.codebook, tokens.tokens));
  return unpatchify(d.out, config_.grid_side, config_.patch());
}

std::vector<ParameterView> PatchVqInpainter::parameters() const {
  std::vector<ParameterView> out;
  weights_.for_each([&](const char* name, const Mat& m) {
    out.push_back(ParameterView{name, static_cast<int>(m.rows()), static_cast<int>(m.cols()),
                                std::span<const double>(m.data(), static_cast<size_t>(m.size())), false});
  });
  return out;
}

std::vector<double> PatchVqInpainter::encoder_features(const Image& cell_image) const {
  const CanvasSpec spec = config_.canvas();
  if (cell_image.channels() != 3 || cell_image.height() != spec.cell_h || cell_image.width() != spec.cell_w) {
    throw UsageError("feature extraction expects a 3 x cell x cell image");
  }
  Image canvas(3, spec.canvas_h(), spec.canvas_w(), spec.fill);
  const Rect r = spec.cell_rect(Cell::bl);
  canvas.paste(cell_image, r.top, r.left);
  const Mat x = patchify(canvas, config_.grid_side, config_.patch());
  const Layout lay(config_);
  Mat xq(config_.half() * config_.half(), x.cols());
  int row = 0;
  for (int i = 0; i < config_.tokens(); ++i) {
    if (lay.bottom_left(i)) xq.row(row++) = x.row(i);
  }
  const Mat z = encode_patches(weights_, xq).z;
  return std::vector<double>(z.data(), z.data() + z.size());
}

// ---------------------------------------------------------------------------
// Training

namespace {

void init_gaussian(Mat& m, Rng& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
}

void check_finite(double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw NumericalError("non-finite loss during " + where);
}

// Flat Adam state for a list of weight matrices.
class MatAdam {
 public:
  explicit MatAdam(std::vector<Mat*> params) : params_(std::move(params)) {
    for (Mat* p : params_) opt_.emplace_back(static_cast<size_t>(p->size()));
  }
  void step(const std::vector<const Mat*>& grads, double lr) {
    for (size_t i = 0; i < params_.size(); ++i) {
      opt_[i].step<double>(std::span<double>(params_[i]->data(), static_cast<size_t>(params_[i]->size())),
                           std::span<const double>(grads[i]->data(), static_cast<size_t>(grads[i]->size())), lr);
    }
  }

 private:
  std::vector<Mat*> params_;
  std::vector<Adam> opt_;
};

Canvas random_gt_canvas(const TaskDataset& ds, const CanvasSpec& spec, Rng& rng, size_t query) {
  std::uniform_int_distribution<size_t> pick(0, ds.size() - 2);
  size_t pair = pick(rng);
  if (pair >= query) ++pair;
  const Sample& p = ds[pair];
  const Sample& q = ds[query];
  return compose_gt_canvas(p.image, mask_to_label_image(p.mask), q.image, mask_to_label_image(q.mask), spec);
}

constexpr double kCycleWeight = 1.0;

void train_tokenizer(PatchVqWeights& w, const PatchVqConfig& arch, const TaskDataset& ds,
                     const ToyTrainConfig& cfg, Rng& rng, ToyTrainReport& report, const ProgressLog& log) {
  const CanvasSpec spec = arch.canvas();
  const int per_canvas = arch.tokens();
  const int canvases = std::max(1, cfg.tokenizer_patches_per_epoch / per_canvas);
  const int batch = cfg.tokenizer_batch;
  const int v = arch.codebook_size, d = arch.code_dim;

  MatAdam opt({&w.enc1_w, &w.enc1_b, &w.enc2_w, &w.enc2_b, &w.codebook, &w.dec1_w, &w.dec1_b, &w.dec2_w, &w.dec2_b});
  bool codebook_ready = false;
  std::uniform_int_distribution<size_t> pick_query(0, ds.size() - 1);

  for (int epoch = 0; epoch < cfg.tokenizer_epochs; ++epoch) {
    Mat data(canvases * per_canvas, arch.patch_dim());
    for (int c = 0; c < canvases; ++c) {
      const Canvas gt = random_gt_canvas(ds, spec, rng, pick_query(rng));
      data.middleRows(c * per_canvas, per_canvas) = patchify(gt.pixels, arch.grid_side, arch.patch());
    }
    std::vector<int> order(data.rows());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<long> usage(v, 0);
    Mat recent_z;
    double epoch_loss = 0.0;
    int batches = 0;
    for (size_t start = 0; start + batch <= order.size(); start += batch) {
      Mat x(batch, data.cols());
      for (int i = 0; i < batch; ++i) x.row(i) = data.row(order[start + i]);
      const EncodeCache enc = encode_patches(w, x);
      if (!codebook_ready) {
        std::uniform_int_distribution<int> pick(0, batch - 1);
        for (int k = 0; k < v; ++k) w.codebook.row(k) = enc.z.row(pick(rng));
        codebook_ready = true;
      }
      const std::vector<int> idx = nearest_codes(w.codebook, enc.z);
      for (int k : idx) ++usage[k];
      const Mat cq = gather_codes(w.codebook, idx);
      const DecodeCache dec = decode_codes(w, cq);

      const double n_el = static_cast<double>(batch) * x.cols();
      const Mat diff = dec.out - x;
      const double rec = diff.squaredNorm() / n_el;
      const Mat zc = enc.z - cq;
      const double cb = zc.squaredNorm() / (static_cast<double>(batch) * d);
      const double loss = rec + (1.0 + cfg.commitment) * cb;
      check_finite(loss, "tokenizer training");
      epoch_loss += loss;
      ++batches;

      // Decoder.
      Mat dpre = (2.0 / n_el) * diff.cwiseProduct(dec.out.cwiseProduct((1.0 - dec.out.array()).matrix()));
      const Mat g_dec2_w = dpre.transpose() * dec.g1;
      const Mat g_dec2_b = dpre.colwise().sum();
      Mat dg1 = (dpre * w.dec2_w).cwiseProduct((dec.g1.array() > 0.0).cast<double>().matrix());
      const Mat g_dec1_w = dg1.transpose() * cq;
      const Mat g_dec1_b = dg1.colwise().sum();
      // Straight-through estimator: the decoder-input gradient goes to z.
      Mat dz = dg1 * w.dec1_w;
      dz += (2.0 * cfg.commitment / (static_cast<double>(batch) * d)) * zc;
      Mat g_codebook = Mat::Zero(v, d);
      for (int i = 0; i < batch; ++i) g_codebook.row(idx[i]) -= (2.0 / (static_cast<double>(batch) * d)) * zc.row(i);
      // Encoder.
      Mat g_enc2_w = dz.transpose() * enc.h1;
      Mat g_enc2_b = dz.colwise().sum();
      const Mat dh1 = (dz * w.enc2_w).cwiseProduct((enc.h1.array() > 0.0).cast<double>().matrix());
      Mat g_enc1_w = dh1.transpose() * x;
      Mat g_enc1_b = dh1.colwise().sum();
      // Cycle term: decoded codes must encode back onto themselves.
      {
        const Mat xc = decode_codes(w, w.codebook).out;
        const EncodeCache cyc = encode_patches(w, xc);
        const Mat dzc = (2.0 * kCycleWeight / (static_cast<double>(v) * d)) * (cyc.z - w.codebook);
        g_enc2_w += dzc.transpose() * cyc.h1;
        g_enc2_b += dzc.colwise().sum();
        const Mat dhc = (dzc * w.enc2_w).cwiseProduct((cyc.h1.array() > 0.0).cast<double>().matrix());
        g_enc1_w += dhc.transpose() * xc;
        g_enc1_b += dhc.colwise().sum();
      }

      opt.step({&g_enc1_w, &g_enc1_b, &g_enc2_w, &g_enc2_b, &g_codebook, &g_dec1_w, &g_dec1_b, &g_dec2_w, &g_dec2_b},
               cfg.tokenizer_lr);
      recent_z = enc.z;
    }
    // Re-seed codes that no patch selected this epoch.
    if (epoch + 1 < cfg.tokenizer_epochs) {
      const Mat z = encode_patches(w, data.topRows(std::min<Eigen::Index>(data.rows(), 4096))).z;
      std::uniform_int_distribution<Eigen::Index> pick(0, z.rows() - 1);
      std::normal_distribution<double> jitter(0.0, 1e-3);
      for (int k = 0; k < v; ++k) {
        if (usage[k] > 0) continue;
        w.codebook.row(k) = z.row(pick(rng));
        for (int j = 0; j < d; ++j) w.codebook(k, j) += jitter(rng);
        ++report.dead_codes_reseeded;
      }
    }
    report.tokenizer_loss.push_back(epoch_loss / std::max(1, batches));
    if (log) {
      const long dead = std::count(usage.begin(), usage.end(), 0L);
      std::ostringstream msg;
      msg << "tokenizer epoch " << epoch + 1 << "/" << cfg.tokenizer_epochs << " loss "
          << report.tokenizer_loss.back() << " unused codes " << dead;
      log(msg.str());
    }
  }
}

// Merges every code whose decode-then-encode lands on another code into that
// code, so that encode(decode(t)) == t for every token the encoder can emit.
void consolidate_codebook(PatchVqWeights& w, const ToyTrainConfig& cfg) {
  const int v = static_cast<int>(w.codebook.rows());
  for (int pass = 0; pass < cfg.consolidation_iters; ++pass) {
    const std::vector<int> image = nearest_codes(w.codebook, encode_patches(w, decode_codes(w, w.codebook).out).z);
    bool changed = false;
    for (int k = 0; k < v; ++k) {
      if (image[k] != k) {
        w.codebook.row(k) = w.codebook.row(image[k]);
        changed = true;
      }
    }
    if (!changed) break;
  }
  // Reachable codes (the lowest id among identical rows) must map to themselves.
  const std::vector<int> image = nearest_codes(w.codebook, encode_patches(w, decode_codes(w, w.codebook).out).z);
  const std::vector<int> self = nearest_codes(w.codebook, w.codebook);
  for (int k = 0; k < v; ++k) {
    if (self[k] == k && image[k] != k) {
      throw NumericalError("tokenizer codebook is not idempotent at code " + std::to_string(k));
    }
  }
}

double measure_reconstruction_mae(const PatchVqWeights& w, const PatchVqConfig& arch, const TaskDataset& ds,
                                  Rng& rng, int canvases) {
  double total = 0.0;
  std::uniform_int_distribution<size_t> pick_query(0, ds.size() - 1);
  for (int c = 0; c < canvases; ++c) {
    const Canvas gt = random_gt_canvas(ds, arch.canvas(), rng, pick_query(rng));
    const Mat x = patchify(gt.pixels, arch.grid_side, arch.patch());
    const Mat rec = decode_codes(w, gather_codes(w.codebook, nearest_codes(w.codebook, encode_patches(w, x).z))).out;
    total += (rec - x).cwiseAbs().mean();
  }
  return total / canvases;
}

void train_predictor(PatchVqWeights& w, const PatchVqConfig& arch, const TaskDataset& ds, const ToyTrainConfig& cfg,
                     Rng& rng, ToyTrainReport& report, const ProgressLog& log) {
  const CanvasSpec spec = arch.canvas();
  const std::vector<int> positions = masked_token_indices(spec, arch.grid_side);
  MatAdam opt({&w.embed_w, &w.embed_b, &w.mask_token, &w.pos, &w.head1_w, &w.head1_b, &w.head_pos, &w.head2_w,
               &w.head2_b});
  std::vector<size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  const double lr0 = cfg.predictor_lr;

  for (int epoch = 0; epoch < cfg.predictor_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = cosine_warm_restarts_lr(lr0, epoch, cfg.predictor_epochs);
    double epoch_loss = 0.0;
    for (size_t start = 0; start < order.size(); start += cfg.predictor_batch) {
      const size_t end = std::min(order.size(), start + cfg.predictor_batch);
      PredictorGrads g(w);
      for (size_t b = start; b < end; ++b) {
        const Canvas gt = random_gt_canvas(ds, spec, rng, order[b]);
        const Mat x = patchify(gt.pixels, arch.grid_side, arch.patch());
        Mat xr(static_cast<int>(positions.size()), x.cols());
        for (size_t i = 0; i < positions.size(); ++i) xr.row(static_cast<int>(i)) = x.row(positions[i]);
        const std::vector<int> targets = nearest_codes(w.codebook, encode_patches(w, xr).z);
        const PredictorCache k = predictor_forward(w, arch, x, positions);
        Mat ds_logits;
        const double loss = cross_entropy(k.s, targets, &ds_logits);
        check_finite(loss, "predictor training");
        epoch_loss += loss;
        ds_logits /= static_cast<double>(end - start);
        predictor_backward(w, arch, k, ds_logits, &g, nullptr);
      }
      opt.step({&g.embed_w, &g.embed_b, &g.mask_token, &g.pos, &g.head1_w, &g.head1_b, &g.head_pos, &g.head2_w,
                &g.head2_b},
               lr);
    }
    report.predictor_loss.push_back(epoch_loss / ds.size());
    if (log) {
      std::ostringstream msg;
      msg << "predictor epoch " << epoch + 1 << "/" << cfg.predictor_epochs << " loss " << report.predictor_loss.back();
      log(msg.str());
    }
  }
}

}  // namespace

PatchVqInpainter train_toy_frozen(const TaskDataset& train, const ToyTrainConfig& cfg, ToyTrainReport* report,
                                  const ProgressLog& log) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.arch.validate();
  if (train.size() < 2) throw UsageError("toy model training needs at least 2 samples");
  for (const auto& s : train.samples()) {
    if (s->image.height() != cfg.arch.cell || s->image.width() != cfg.arch.cell) {
      throw DataError("sample " + s->id + " does not match the model cell size");
    }
  }
  if (cfg.tokenizer_epochs < 1 || cfg.predictor_epochs < 1 || cfg.tokenizer_batch < 1 || cfg.predictor_batch < 1) {
    throw UsageError("toy training epochs and batch sizes must be positive");
  }
  ToyTrainReport local;
  ToyTrainReport& rep = report ? *report : local;
  rep = ToyTrainReport{};

  const PatchVqConfig& arch = cfg.arch;
  PatchVqWeights w = PatchVqWeights::zeros(arch);
  Rng init_rng = make_rng({cfg.seed, 0x1a17});
  init_gaussian(w.enc1_w, init_rng, std::sqrt(2.0 / arch.patch_dim()));
  init_gaussian(w.enc2_w, init_rng, std::sqrt(1.0 / arch.tokenizer_hidden));
  init_gaussian(w.dec1_w, init_rng, std::sqrt(2.0 / arch.code_dim));
  init_gaussian(w.dec2_w, init_rng, std::sqrt(1.0 / arch.tokenizer_hidden));
  init_gaussian(w.embed_w, init_rng, std::sqrt(2.0 / arch.patch_dim()));
  init_gaussian(w.mask_token, init_rng, 0.02);
  init_gaussian(w.pos, init_rng, 0.02);
  init_gaussian(w.head1_w, init_rng, std::sqrt(2.0 / (6.0 * arch.embed_dim)));
  init_gaussian(w.head_pos, init_rng, 0.02);
  init_gaussian(w.head2_w, init_rng, std::sqrt(1.0 / arch.head_hidden));

  Rng tok_rng = make_rng({cfg.seed, 0x70c});
  train_tokenizer(w, arch, train, cfg, tok_rng, rep, log);
  consolidate_codebook(w, cfg);
  Rng eval_rng = make_rng({cfg.seed, 0xe7a1});
  rep.reconstruction_mae = measure_reconstruction_mae(w, arch, train, eval_rng, 32);
  if (log) log("tokenizer reconstruction MAE " + std::to_string(rep.reconstruction_mae));
  if (!(rep.reconstruction_mae <= cfg.max_reconstruction_mae)) {
    throw NumericalError("tokenizer reconstruction MAE " + std::to_string(rep.reconstruction_mae) +
                         " exceeds threshold " + std::to_string(cfg.max_reconstruction_mae));
  }

  Rng pred_rng = make_rng({cfg.seed, 0x9ed});
  train_predictor(w, arch, train, cfg, pred_rng, rep, log);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return PatchVqInpainter(arch, std::move(w), cfg.max_reconstruction_mae);
}

// ---------------------------------------------------------------------------
// Persistence

namespace {
constexpr uint32_t kWeightsMagic = 0x574d4945;  // "EIMW"
constexpr uint32_t kWeightsVersion = 1;
constexpr const char* kFormat = "einmemo-patch-vq/1";
}  // namespace

std::vector<uint8_t> serialize_weights(const PatchVqWeights& w) {
  ByteWriter out;
  out.put(kWeightsMagic);
  out.put(kWeightsVersion);
  uint32_t count = 0;
  w.for_each([&](const char*, const Mat&) { ++count; });
  out.put(count);
  w.for_each([&](const char* name, const Mat& m) {
    out.put_string(name);
    out.put<uint32_t>(static_cast<uint32_t>(m.rows()));
    out.put<uint32_t>(static_cast<uint32_t>(m.cols()));
    out.put_array<double>(std::span<const double>(m.data(), static_cast<size_t>(m.size())));
  });
  return out.bytes();
}

void save_model(const PatchVqInpainter& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string digest = to_hex(model.weight_digest());
  const nlohmann::json descriptor{{"format", kFormat},
                                  {"arch", model.config()},
                                  {"canvas_size", model.config().canvas_size()},
                                  {"grid_side", model.config().grid_side},
                                  {"codebook_size", model.config().codebook_size},
                                  {"code_dim", model.config().code_dim},
                                  {"reconstruction_mae_threshold", model.reconstruction_threshold()},
                                  {"digest", digest}};
  std::ofstream(dir / "descriptor.json") << descriptor.dump(2) << '\n';
  write_file_bytes(dir / "weights.bin", serialize_weights(model.weights()));
  std::ofstream(dir / "digest.sha256") << digest << '\n';
}

PatchVqInpainter load_model(const std::filesystem::path& dir) {
  const auto desc_path = dir / "descriptor.json";
  if (!std::filesystem::exists(desc_path)) throw DataError("missing model descriptor " + desc_path.string());
  nlohmann::json desc;
  PatchVqConfig arch;
  try {
    desc = nlohmann::json::parse(std::ifstream(desc_path));
    if (desc.at("format").get<std::string>() != kFormat) {
      throw DataError("unsupported model format " + desc.at("format").get<std::string>());
    }
    arch = desc.at("arch").get<PatchVqConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid model descriptor: " + std::string(e.what()));
  }
  const int grid = desc.value("grid_side", arch.grid_side);
  const int canvas = desc.value("canvas_size", arch.canvas_size());
  if (grid <= 0 || canvas % grid != 0) throw DataError("descriptor grid side does not divide the canvas");
  if (grid != arch.grid_side || canvas != arch.canvas_size() ||
      desc.value("codebook_size", arch.codebook_size) != arch.codebook_size ||
      desc.value("code_dim", arch.code_dim) != arch.code_dim) {
    throw DataError("descriptor fields disagree with the architecture record");
  }
  try {
    arch.validate();
  } catch (const UsageError& e) {
    throw DataError(std::string("incompatible descriptor: ") + e.what());
  }

  const auto bytes = read_file_bytes(dir / "weights.bin");
  ByteReader in(bytes);
  if (in.get<uint32_t>() != kWeightsMagic) throw DataError("weights.bin is not a weight file");
  if (in.get<uint32_t>() != kWeightsVersion) throw DataError("unsupported weight file version");
  PatchVqWeights w = PatchVqWeights::zeros(arch);
  uint32_t count = 0;
  w.for_each([&](const char*, const Mat&) { ++count; });
  if (in.get<uint32_t>() != count) throw DataError("weight file has the wrong number of blocks");
  w.for_each([&](const char* name, Mat& m) {
    if (in.get_string() != name) throw DataError(std::string("weight file block order mismatch at ") + name);
    const auto rows = in.get<uint32_t>(), cols = in.get<uint32_t>();
    if (rows != m.rows() || cols != m.cols()) throw DataError(std::string("weight block ") + name + " has the wrong shape");
    in.get_array<double>(std::span<double>(m.data(), static_cast<size_t>(m.size())));
  });
  if (in.remaining() != 0) throw DataError("trailing bytes in weight file");
  PatchVqInpainter model(arch, std::move(w), desc.value("reconstruction_mae_threshold", 0.0));
  if (desc.contains("digest") && desc["digest"].get<std::string>() != to_hex(model.weight_digest())) {
    throw DataError("model weight digest does not match descriptor");
  }
  return model;
}

}  // namespace einmemo
