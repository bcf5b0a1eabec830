#include "odeforge/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "odeforge/error.hpp"

namespace odeforge {

// ---------------------------------------------------------------------------
// Data

void DomainDataset::validate() const {
  auto check = [&](const Tensor& x, const char* what) {
    if (x.rank() != 4) throw ShapeError(std::string(what) + ": expected (B, C, H, W), got " + shape_str(x.shape()));
  };
  check(source.x, "source");
  check(target, "target");
  check(target_eval.x, "target_eval");
  const Shape s = sample_shape();
  for (const Tensor* t : {&target, &target_eval.x})
    if (Shape(t->shape().begin() + 1, t->shape().end()) != s)
      throw ShapeError("source and target samples differ in shape");
  if (source.y.size() != source.x.dim(0) || target_eval.y.size() != target_eval.x.dim(0))
    throw InvalidArgument("label count does not match sample count");
  for (const auto* ys : {&source.y, &target_eval.y})
    for (std::size_t y : *ys)
      if (y >= classes) throw InvalidArgument("label " + std::to_string(y) + " out of range for " + std::to_string(classes) + " classes");
}

Shape DomainDataset::sample_shape() const { return Shape(source.x.shape().begin() + 1, source.x.shape().end()); }

namespace {

// 5x7 digit font, one row per string
const char* const kFont[10][7] = {
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
    {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},
    {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},
};

}  // namespace

LabeledSet make_glyphs(std::size_t n, bool inverted, const GlyphConfig& cfg, std::uint64_t seed) {
  constexpr std::size_t C = 3, H = 8, W = 8;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> cls(0, 9), ox(0, W - 5), oy(0, H - 7);
  std::uniform_real_distribution<double> fg(0.6, 1.0), bg(0.0, 0.3), u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  LabeledSet out{Tensor({n, C, H, W}), std::vector<std::size_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = cls(rng), dx = ox(rng), dy = oy(rng);
    double f[C], b[C];
    for (std::size_t ch = 0; ch < C; ++ch) {
      f[ch] = fg(rng);
      b[ch] = bg(rng);
    }
    if (u(rng) < cfg.dark_on_light) std::swap(f, b);
    out.y[i] = c;
    double* px = out.x.data() + i * C * H * W;
    for (std::size_t ch = 0; ch < C; ++ch)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const bool on = y >= dy && y < dy + 7 && x >= dx && x < dx + 5 && kFont[c][y - dy][x - dx] == '1';
          double v = (on ? f[ch] : b[ch]) + cfg.noise * noise(rng);
          if (inverted) v = 1.0 - v + cfg.target_noise * noise(rng);
          px[(ch * H + y) * W + x] = v;
        }
  }
  return out;
}

DomainDataset make_glyph_dataset(const GlyphConfig& cfg) {
  DomainDataset d;
  d.source = make_glyphs(cfg.source, false, cfg, cfg.seed);
  d.target = make_glyphs(cfg.target, true, cfg, cfg.seed + 1).x;
  d.target_eval = make_glyphs(cfg.eval, true, cfg, cfg.seed + 2);
  d.classes = 10;
  return d;
}

Tensor gather_rows(const Tensor& batch, const std::vector<std::size_t>& rows) {
  if (batch.rank() < 2) throw ShapeError("gather_rows expects a batch");
  const std::size_t per = batch.size() / batch.dim(0);
  Shape s = batch.shape();
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= batch.dim(0)) throw InvalidArgument("gather_rows: row out of range");
    std::copy_n(batch.data() + rows[i] * per, per, out.data() + i * per);
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1))
    throw ShapeError("concat_rows: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<double> v(a.vec());
  v.insert(v.end(), b.vec().begin(), b.vec().end());
  return Tensor(s, std::move(v));
}

// ---------------------------------------------------------------------------
// Losses

namespace {

// (rows, cols) view of a (K) or (B, K) logit tensor
std::pair<std::size_t, std::size_t> as_matrix(const Tensor& t, const char* what) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw ShapeError(std::string(what) + ": expected (K) or (B, K), got " + shape_str(t.shape()));
}

}  // namespace

Tensor softmax_rows(const Tensor& logits, double temperature) {
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
  const auto [rows, k] = as_matrix(logits, "softmax");
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.data() + r * k;
    double* p = out.data() + r * k;
    const double mx = *std::max_element(z, z + k) / temperature;
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += p[j] = std::exp(z[j] / temperature - mx);
    for (std::size_t j = 0; j < k; ++j) p[j] /= sum;
  }
  return out;
}

double soft_target_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
  require_same_shape(teacher_logits.shape(), student_logits.shape(), "soft_target_loss");
  const auto [rows, k] = as_matrix(teacher_logits, "soft_target_loss");
  if (rows == 0) return 0.0;
  const Tensor p = softmax_rows(teacher_logits, temperature);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    // log-softmax of the student row, computed stably
    const double* z = student_logits.data() + r * k;
    const double mx = *std::max_element(z, z + k) / temperature;
    double lse = 0.0;
    for (std::size_t j = 0; j < k; ++j) lse += std::exp(z[j] / temperature - mx);
    lse = mx + std::log(lse);
    double kl = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double pj = p[r * k + j];
      if (pj > 0.0) kl += pj * (std::log(pj) - (z[j] / temperature - lse));
    }
    total += std::max(kl, 0.0);  // rounding can dip a hair below zero
  }
  return total / static_cast<double>(rows) * temperature * temperature;
}

Tensor soft_target_grad(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
  require_same_shape(teacher_logits.shape(), student_logits.shape(), "soft_target_grad");
  const auto [rows, k] = as_matrix(teacher_logits, "soft_target_grad");
  const Tensor p = softmax_rows(teacher_logits, temperature);
  Tensor g = softmax_rows(student_logits, temperature);
  // T^2 * (q - p) / T per row, averaged over rows
  const double scale = rows ? temperature / static_cast<double>(rows) : 0.0;
  for (std::size_t i = 0; i < rows * k; ++i) g[i] = (g[i] - p[i]) * scale;
  return g;
}

namespace {

Tensor centered(const Tensor& f) {
  const std::size_t n = f.dim(0), d = f.dim(1);
  Tensor c = f;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += f[i * d + j];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) c[i * d + j] -= mean;
  }
  return c;
}

void check_features(const Tensor& s, const Tensor& t) {
  if (s.rank() != 2 || t.rank() != 2) throw ShapeError("coral: features must be (n, d) matrices");
  if (s.dim(1) != t.dim(1))
    throw ShapeError("coral: feature dimensions differ (" + std::to_string(s.dim(1)) + " vs " + std::to_string(t.dim(1)) + ")");
  if (s.dim(0) < 2 || t.dim(0) < 2) throw InvalidArgument("coral: covariance needs at least two samples per domain");
}

}  // namespace

Tensor feature_covariance(const Tensor& features) {
  if (features.rank() != 2 || features.dim(0) < 2) throw InvalidArgument("covariance needs an (n >= 2, d) matrix");
  const std::size_t n = features.dim(0), d = features.dim(1);
  const Tensor c = centered(features);
  Tensor cov({d, d});
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += c[i * d + a] * c[i * d + b];
      cov[a * d + b] = cov[b * d + a] = s / static_cast<double>(n - 1);
    }
  return cov;
}

double coral_loss(const Tensor& source_features, const Tensor& target_features) {
  check_features(source_features, target_features);
  const double d = static_cast<double>(source_features.dim(1));
  const Tensor cs = feature_covariance(source_features), ct = feature_covariance(target_features);
  double sq = 0.0;
  for (std::size_t i = 0; i < cs.size(); ++i) sq += (cs[i] - ct[i]) * (cs[i] - ct[i]);
  return sq / (4.0 * d * d);
}

std::pair<Tensor, Tensor> coral_grad(const Tensor& source_features, const Tensor& target_features) {
  check_features(source_features, target_features);
  const std::size_t d = source_features.dim(1);
  const Tensor cs = feature_covariance(source_features), ct = feature_covariance(target_features);
  Tensor diff({d, d});
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = cs[i] - ct[i];
  // dL/dD = sign * Xc (Cs - Ct) / ((n - 1) d^2); centering drops out because
  // the columns of Xc already sum to zero
  auto side = [&](const Tensor& f, double sign) {
    const std::size_t n = f.dim(0);
    const Tensor c = centered(f);
    const double scale = sign / (static_cast<double>(n - 1) * static_cast<double>(d * d));
    Tensor g({n, d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t b = 0; b < d; ++b) {
        double s = 0.0;
        for (std::size_t a = 0; a < d; ++a) s += c[i * d + a] * diff[a * d + b];
        g[i * d + b] = s * scale;
      }
    return g;
  };
  return {side(source_features, 1.0), side(target_features, -1.0)};
}

double combined_loss(double l_soft, double l_dc, double lambda) {
  if (lambda < 0.0) throw InvalidArgument("lambda must be non-negative");
  return l_soft + lambda * l_dc;
}

double cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const auto [rows, k] = as_matrix(logits, "cross_entropy");
  if (labels.size() != rows) throw ShapeError("cross_entropy: label count does not match rows");
  if (rows == 0) return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= k) throw InvalidArgument("cross_entropy: label out of range");
    const double* z = logits.data() + r * k;
    const double mx = *std::max_element(z, z + k);
    double lse = 0.0;
    for (std::size_t j = 0; j < k; ++j) lse += std::exp(z[j] - mx);
    total += mx + std::log(lse) - z[labels[r]];
  }
  return total / static_cast<double>(rows);
}

Tensor cross_entropy_grad(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const auto [rows, k] = as_matrix(logits, "cross_entropy");
  if (labels.size() != rows) throw ShapeError("cross_entropy: label count does not match rows");
  Tensor g = softmax_rows(logits);
  for (std::size_t r = 0; r < rows; ++r) g[r * k + labels[r]] -= 1.0;
  if (rows) g *= 1.0 / static_cast<double>(rows);
  return g;
}

// ---------------------------------------------------------------------------
// Schedule, selection, optimizers

double lr_at(double p, const LrSchedule& s) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("training progress p must lie in [0, 1]");
  return s.eta0 / std::pow(1.0 + s.alpha * p, s.beta);
}

Selection select_from_logits(const Tensor& logits, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw InvalidArgument("threshold must lie in [0, 1]");
  const auto [rows, k] = as_matrix(logits, "select_samples");
  const Tensor p = softmax_rows(logits);
  Selection sel;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = p.data() + r * k;
    const std::size_t best = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    if (row[best] > threshold) {
      sel.indices.push_back(r);
      sel.labels.push_back(best);
    }
  }
  return sel;
}

Selection select_samples(const Model& model, const Tensor& batch, double threshold) {
  return select_from_logits(model.forward(batch).logits, threshold);
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd" || s == "SGD") return OptimizerKind::sgd;
  if (s == "adam" || s == "Adam") return OptimizerKind::adam;
  throw InvalidArgument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

Optimizer::Optimizer(OptimizerKind kind, double momentum, double beta1, double beta2, double eps)
    : kind_(kind), momentum_(momentum), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Optimizer::step(const std::vector<Param*>& params, double lr) {
  if (m_.empty()) {
    for (const Param* p : params) {
      m_.emplace_back(p->value.shape());
      if (kind_ == OptimizerKind::adam) v_.emplace_back(p->value.shape());
    }
  }
  if (m_.size() != params.size()) throw InvalidArgument("optimizer was created for a different parameter set");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    Tensor& m = m_[i];
    if (m.shape() != p.value.shape()) throw ShapeError("optimizer state does not match parameter " + p.name);
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      if (kind_ == OptimizerKind::sgd) {
        m[j] = momentum_ * m[j] + g;
        p.value[j] -= lr * m[j];
      } else {
        Tensor& v = v_[i];
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
        p.value[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      }
    }
    ++p.version;
  }
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (lambda < 0.0) throw InvalidArgument("lambda must be non-negative");
  for (double t : {threshold1, threshold2})
    if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("thresholds must lie in [0, 1]");
  if (threshold1 < threshold2) throw InvalidArgument("threshold1 must not be lower than threshold2");
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
  if (epochs < 0) throw InvalidArgument("epochs must be non-negative");
  if (batch_size < 2) throw InvalidArgument("batch_size must be at least 2");
  if (!(schedule.eta0 > 0.0) || schedule.alpha < 0.0 || schedule.beta < 0.0)
    throw InvalidArgument("learning-rate schedule constants out of range");
}

std::string render_loss_csv(const LossReport& report) {
  std::ostringstream o;
  o << "epoch,l_soft,l_dc,l,lr,selected,acc\n";
  char line[256];
  for (const auto& e : report.epochs) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g,%zu,%.2f\n", e.epoch, e.l_soft, e.l_dc, e.l, e.lr, e.selected,
                  e.acc);
    o << line;
  }
  return o.str();
}

double evaluate_accuracy(const Model& model, const LabeledSet& data) {
  if (data.size() == 0) return 0.0;
  constexpr std::size_t chunk = 250;
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < data.size(); lo += chunk) {
    std::vector<std::size_t> rows(std::min(chunk, data.size() - lo));
    std::iota(rows.begin(), rows.end(), lo);
    const Tensor logits = model.forward(gather_rows(data.x, rows)).logits;
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double* z = logits.data() + i * k;
      if (static_cast<std::size_t>(std::max_element(z, z + k) - z) == data.y[lo + i]) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

// Rows [lo, lo + n) of a batched tensor.
Tensor slice_rows(const Tensor& t, std::size_t lo, std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), lo);
  return gather_rows(t, rows);
}

struct Batching {
  std::size_t batch = 0;
  std::size_t per_epoch = 0;
};

// Full batches only, so every covariance sees the same number of rows.
Batching batching(std::size_t n, std::size_t want) {
  if (n < 2) throw InvalidArgument("training needs at least two target samples");
  const std::size_t b = std::min(want, n);
  return {b, n / b};
}

double progress(std::size_t it, std::size_t total) {
  return total > 1 ? static_cast<double>(it) / static_cast<double>(total - 1) : 0.0;
}

// Shared epoch loop: `step(xs_rows, xt_rows, lr, stats)` runs one update.
template <typename Step>
LossReport train_loop(Model& model, const DomainDataset& data, const TrainConfig& cfg, const std::string& stage,
                      double threshold, Step step) {
  LossReport rep;
  rep.stage = stage;
  rep.threshold = threshold;
  const std::size_t n_t = data.target.dim(0), n_s = data.source.size();
  const Batching bt = batching(std::min(n_t, n_s), cfg.batch_size);
  const std::size_t total = static_cast<std::size_t>(cfg.epochs) * bt.per_epoch;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> t_order(n_t), s_order(n_s);
  std::iota(t_order.begin(), t_order.end(), 0);
  std::iota(s_order.begin(), s_order.end(), 0);
  Optimizer opt(cfg.optimizer);
  std::size_t it = 0;
  for (int e = 1; e <= cfg.epochs; ++e) {
    std::shuffle(t_order.begin(), t_order.end(), rng);
    std::shuffle(s_order.begin(), s_order.end(), rng);
    EpochStats st;
    st.epoch = e;
    std::size_t soft_batches = 0;
    for (std::size_t b = 0; b < bt.per_epoch; ++b, ++it) {
      const std::vector<std::size_t> tr(t_order.begin() + b * bt.batch, t_order.begin() + (b + 1) * bt.batch);
      const std::vector<std::size_t> sr(s_order.begin() + b * bt.batch, s_order.begin() + (b + 1) * bt.batch);
      st.lr = lr_at(progress(it, total), cfg.schedule);
      model.zero_grad();
      double l_soft = 0.0, l_dc = 0.0;
      const bool soft = step(sr, tr, l_soft, l_dc, st.selected);
      if (soft) {
        st.l_soft += l_soft;
        ++soft_batches;
      }
      st.l_dc += l_dc;
      opt.step(model.parameters(), st.lr);
    }
    if (soft_batches) st.l_soft /= static_cast<double>(soft_batches);
    if (bt.per_epoch) st.l_dc /= static_cast<double>(bt.per_epoch);
    st.l = combined_loss(st.l_soft, st.l_dc, cfg.lambda);
    st.acc = evaluate_accuracy(model, data.target_eval);
    if (soft_batches == 0)
      rep.warnings.push_back("epoch " + std::to_string(e) + ": no target sample above threshold, soft loss skipped");
    rep.epochs.push_back(st);
  }
  return rep;
}

}  // namespace

LossReport pretrain_teacher(Model& teacher, const DomainDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  return train_loop(teacher, data, cfg, "teacher", 0.0,
                    [&](const std::vector<std::size_t>& sr, const std::vector<std::size_t>& tr, double& l_ce,
                        double& l_dc, std::size_t&) {
                      const std::size_t b = sr.size();
                      const Tensor x = concat_rows(gather_rows(data.source.x, sr), gather_rows(data.target, tr));
                      std::vector<std::size_t> ys(b);
                      for (std::size_t i = 0; i < b; ++i) ys[i] = data.source.y[sr[i]];
                      ModelTape tape;
                      const ModelOutput out = teacher.forward(x, Mode::train, &tape);
                      const Tensor fs = slice_rows(out.features, 0, b), ft = slice_rows(out.features, b, b);
                      const Tensor ls = slice_rows(out.logits, 0, b);
                      l_ce = cross_entropy(ls, ys);
                      l_dc = coral_loss(fs, ft);
                      auto [gs, gt] = coral_grad(fs, ft);
                      Tensor gf = concat_rows(gs, gt);
                      gf *= cfg.lambda;
                      const Tensor gl = concat_rows(cross_entropy_grad(ls, ys), Tensor({b, out.logits.dim(1)}));
                      teacher.backward(tape, gf, gl);
                      return true;
                    });
}

LossReport train_student(const Model& teacher, Model& student, const DomainDataset& data, const TrainConfig& cfg,
                         double threshold) {
  cfg.validate();
  data.validate();
  if (teacher.spec().classes != student.spec().classes) throw InvalidArgument("teacher and student class counts differ");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw InvalidArgument("threshold must lie in [0, 1]");
  return train_loop(student, data, cfg, "student", threshold,
                    [&](const std::vector<std::size_t>& sr, const std::vector<std::size_t>& tr, double& l_soft,
                        double& l_dc, std::size_t& selected) {
                      const BatchLosses b = distill_batch(teacher, student, gather_rows(data.source.x, sr),
                                                          gather_rows(data.target, tr), cfg, threshold, true);
                      l_soft = b.l_soft;
                      l_dc = b.l_dc;
                      selected += b.selected;
                      return b.selected > 0;
                    });
}

BatchLosses distill_batch(const Model& teacher, Model& student, const Tensor& source_x, const Tensor& target_x,
                          const TrainConfig& cfg, double threshold, bool accumulate) {
  const std::size_t b = source_x.dim(0);
  if (target_x.dim(0) != b) throw ShapeError("distill_batch: source and target batches differ in size");
  BatchLosses r;
  const Tensor t_logits = teacher.forward(target_x).logits;
  const Selection sel = select_from_logits(t_logits, threshold);
  r.selected = sel.indices.size();
  ModelTape tape;
  const ModelOutput out = student.forward(concat_rows(source_x, target_x), Mode::train, accumulate ? &tape : nullptr);
  const Tensor fs = slice_rows(out.features, 0, b), ft = slice_rows(out.features, b, b);
  r.l_dc = coral_loss(fs, ft);
  const std::size_t k = out.logits.dim(1);
  std::vector<std::size_t> rows(sel.indices);
  for (auto& i : rows) i += b;
  Tensor s_sel, t_sel;
  if (!rows.empty()) {
    s_sel = gather_rows(out.logits, rows);
    t_sel = gather_rows(t_logits, sel.indices);
    r.l_soft = soft_target_loss(t_sel, s_sel, cfg.temperature);
  }
  if (!accumulate) return r;
  auto [gs, gt] = coral_grad(fs, ft);
  Tensor gf = concat_rows(gs, gt);
  gf *= cfg.lambda;
  Tensor gl({2 * b, k});
  if (!rows.empty()) {
    const Tensor g = soft_target_grad(t_sel, s_sel, cfg.temperature);
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(g.data() + i * k, k, gl.data() + rows[i] * k);
  }
  student.backward(tape, gf, gl);
  return r;
}

PipelineResult run_pipeline(const Model& teacher, const ModelSpec& student_spec, const DomainDataset& data,
                            const TrainConfig& cfg) {
  cfg.validate();
  PipelineResult r{build_model(student_spec, cfg.seed + 1), build_model(student_spec, cfg.seed + 2), {}, {}};
  r.stage1 = train_student(teacher, r.student1, data, cfg, cfg.threshold1);
  r.stage1.stage = "student1";
  r.stage2 = train_student(r.student1, r.student2, data, cfg, cfg.threshold2);
  r.stage2.stage = "student2";
  return r;
}

// ---------------------------------------------------------------------------
// Job config

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

double real_of(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw InvalidArgument("config key '" + key + "': '" + v + "' is not a number");
}

long int_of(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long d = std::stol(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw InvalidArgument("config key '" + key + "': '" + v + "' is not an integer");
}

std::string join_path(const std::string& base, const std::string& p) {
  if (p.empty() || p[0] == '/' || base.empty() || base == ".") return p;
  return base + "/" + p;
}

}  // namespace

TrainJob parse_train_config(const std::string& text, const std::string& base_dir) {
  TrainJob job;
  job.teacher = default_teacher_spec();
  job.student = default_student_spec();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw InvalidArgument("train config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(t.substr(0, eq)), v = trim(t.substr(eq + 1));
    TrainConfig& c = job.train;
    if (key == "lambda") c.lambda = real_of(key, v);
    else if (key == "threshold1") c.threshold1 = real_of(key, v);
    else if (key == "threshold2") c.threshold2 = real_of(key, v);
    else if (key == "temperature") c.temperature = real_of(key, v);
    else if (key == "optimizer") c.optimizer = parse_optimizer(v);
    else if (key == "epochs") c.epochs = static_cast<int>(int_of(key, v));
    else if (key == "batch_size") {
      const long b = int_of(key, v);
      if (b < 2) throw InvalidArgument("config key 'batch_size' must be at least 2");
      c.batch_size = static_cast<std::size_t>(b);
    } else if (key == "seed") c.seed = static_cast<std::uint64_t>(int_of(key, v));
    else if (key == "eta0") c.schedule.eta0 = real_of(key, v);
    else if (key == "alpha") c.schedule.alpha = real_of(key, v);
    else if (key == "beta") c.schedule.beta = real_of(key, v);
    else if (key == "dataset") job.dataset = v == "synthetic" ? v : join_path(base_dir, v);
    else if (key == "teacher_epochs") job.teacher_epochs = static_cast<int>(int_of(key, v));
    else if (key == "teacher") job.teacher = load_model_config(join_path(base_dir, v));
    else if (key == "source_samples" || key == "target_samples" || key == "eval_samples") {
      const long n = int_of(key, v);
      if (n < 2) throw InvalidArgument("config key '" + key + "' must be at least 2");
      (key[0] == 's' ? job.glyphs.source : key[0] == 't' ? job.glyphs.target : job.glyphs.eval) = static_cast<std::size_t>(n);
    } else if (key == "student") job.student = load_model_config(join_path(base_dir, v));
    else throw InvalidArgument("train config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  job.train.validate();
  if (job.teacher_epochs < 0) throw InvalidArgument("teacher_epochs must be non-negative");
  if (job.teacher.classes != job.student.classes || job.teacher.input_shape != job.student.input_shape)
    throw InvalidArgument("teacher and student must share input shape and class count");
  job.glyphs.seed = job.train.seed;
  return job;
}

ModelSpec default_teacher_spec() {
  ModelSpec s;
  s.variant = Variant::resnet;
  s.num_blocks = 3;
  s.base_channels = 8;
  s.iterations = 2;
  s.step = 1.0;
  return s;
}

ModelSpec default_student_spec() {
  ModelSpec s;
  s.variant = Variant::dsodenet;
  s.num_blocks = 3;
  s.base_channels = 8;
  s.iterations = 2;
  s.step = 0.5;
  return s;
}

namespace {

Tensor rows_from_json(const nlohmann::json& j, const Shape& sample, const char* what) {
  if (!j.is_array()) throw InvalidArgument(std::string("dataset field '") + what + ".x' must be an array of samples");
  const std::size_t per = shape_size(sample);
  Shape s{j.size()};
  s.insert(s.end(), sample.begin(), sample.end());
  Tensor t(s);
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& row = j[i];
    if (!row.is_array() || row.size() != per)
      throw InvalidArgument(std::string("dataset field '") + what + ".x' sample " + std::to_string(i) + " has the wrong size");
    for (std::size_t k = 0; k < per; ++k) t[i * per + k] = row[k].get<double>();
  }
  return t;
}

nlohmann::json rows_to_json(const Tensor& t) {
  nlohmann::json j = nlohmann::json::array();
  const std::size_t n = t.dim(0), per = n ? t.size() / n : 0;
  for (std::size_t i = 0; i < n; ++i) j.push_back(std::vector<double>(t.data() + i * per, t.data() + (i + 1) * per));
  return j;
}

}  // namespace

DomainDataset load_dataset_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InvalidArgument("cannot open dataset '" + path + "'");
  DomainDataset d;
  try {
    const nlohmann::json j = nlohmann::json::parse(f);
    d.classes = j.at("classes").get<std::size_t>();
    const Shape sample = j.at("shape").get<Shape>();
    d.source.x = rows_from_json(j.at("source").at("x"), sample, "source");
    d.source.y = j.at("source").at("y").get<std::vector<std::size_t>>();
    d.target = rows_from_json(j.at("target").at("x"), sample, "target");
    d.target_eval.x = rows_from_json(j.at("eval").at("x"), sample, "eval");
    d.target_eval.y = j.at("eval").at("y").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("dataset '" + path + "': " + e.what());
  }
  d.validate();
  return d;
}

void save_dataset_file(const DomainDataset& data, const std::string& path) {
  nlohmann::json j;
  j["classes"] = data.classes;
  j["shape"] = data.sample_shape();
  j["source"] = {{"x", rows_to_json(data.source.x)}, {"y", data.source.y}};
  j["target"] = {{"x", rows_to_json(data.target)}};
  j["eval"] = {{"x", rows_to_json(data.target_eval.x)}, {"y", data.target_eval.y}};
  std::ofstream f(path);
  if (!f) throw InvalidArgument("cannot write dataset '" + path + "'");
  f << j.dump() << "\n";
}

}  // namespace odeforge
