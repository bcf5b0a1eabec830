#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "odeforge/model.hpp"
#include "odeforge/tensor.hpp"

namespace odeforge {

// ---------------------------------------------------------------------------
// Data

struct LabeledSet {
  Tensor x;  // (B, C, H, W)
  std::vector<std::size_t> y;

  std::size_t size() const { return y.size(); }
};

struct DomainDataset {
  LabeledSet source;
  Tensor target;           // unlabeled (B, C, H, W)
  LabeledSet target_eval;  // labels used for evaluation only
  std::size_t classes = 10;

  void validate() const;
  Shape sample_shape() const;
};

struct GlyphConfig {
  std::size_t source = 1500;
  std::size_t target = 1500;
  std::size_t eval = 1000;
  double noise = 0.05;         // pixel noise in both domains
  double target_noise = 0.10;  // extra noise after inversion
  double dark_on_light = 0.3;  // share of source glyphs drawn with swapped polarity
  std::uint64_t seed = 1;
};

// 3x8x8 renderings of the ten digits with random offset and colors, mostly
// light on dark. The target domain is the same generator color-inverted with
// extra noise, so it is mostly dark on light.
DomainDataset make_glyph_dataset(const GlyphConfig& cfg);
LabeledSet make_glyphs(std::size_t n, bool inverted, const GlyphConfig& cfg, std::uint64_t seed);

// Rows [begin, begin + count) of a batch tensor, in the given order.
Tensor gather_rows(const Tensor& batch, const std::vector<std::size_t>& rows);
Tensor concat_rows(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Losses. Logits are (B, K) or (K); features are (n, d).

double soft_target_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature);
// d(loss)/d(student_logits)
Tensor soft_target_grad(const Tensor& teacher_logits, const Tensor& student_logits, double temperature);

double coral_loss(const Tensor& source_features, const Tensor& target_features);
// d(loss)/d(source), d(loss)/d(target)
std::pair<Tensor, Tensor> coral_grad(const Tensor& source_features, const Tensor& target_features);
// Unbiased feature covariance (d, d).
Tensor feature_covariance(const Tensor& features);

double combined_loss(double l_soft, double l_dc, double lambda);

double cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);
Tensor cross_entropy_grad(const Tensor& logits, const std::vector<std::size_t>& labels);

Tensor softmax_rows(const Tensor& logits, double temperature = 1.0);

// ---------------------------------------------------------------------------
// Schedule, selection, optimizers

struct LrSchedule {
  double eta0 = 0.01;
  double alpha = 10.0;
  double beta = 0.75;
};

// eta0 / (1 + alpha p)^beta, p in [0, 1]
double lr_at(double p, const LrSchedule& s = {});

struct Selection {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> labels;
};

// Keeps rows whose max softmax probability is strictly above the threshold.
Selection select_from_logits(const Tensor& logits, double threshold);
Selection select_samples(const Model& model, const Tensor& batch, double threshold);

enum class OptimizerKind { sgd, adam };
OptimizerKind parse_optimizer(const std::string& s);
std::string to_string(OptimizerKind k);

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double momentum = 0.9, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  // One update of every parameter from its accumulated gradient.
  void step(const std::vector<Param*>& params, double lr);
  OptimizerKind kind() const { return kind_; }

 private:
  OptimizerKind kind_;
  double momentum_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lambda = 1.0;
  double threshold1 = 0.9;
  double threshold2 = 0.8;
  double temperature = 4.0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  LrSchedule schedule;
  int epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;

  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double l_soft = 0.0;
  double l_dc = 0.0;
  double l = 0.0;
  double lr = 0.0;  // rate used by the last update of the epoch
  std::size_t selected = 0;
  double acc = 0.0;  // percent on the held-out target set
};

struct LossReport {
  std::string stage;
  double threshold = 0.0;
  std::vector<EpochStats> epochs;
  std::vector<std::string> warnings;
};

// Header: epoch,l_soft,l_dc,l,lr,selected,acc
std::string render_loss_csv(const LossReport& report);

// Percent of correctly classified samples (inference mode).
double evaluate_accuracy(const Model& model, const LabeledSet& data);

// Supervised cross-entropy on the source labels plus lambda times the
// covariance alignment term between source and target features. The report's
// l_soft column carries the cross-entropy.
LossReport pretrain_teacher(Model& teacher, const DomainDataset& data, const TrainConfig& cfg);

// Distills a frozen teacher into the student on confidently pseudo-labeled
// target samples, with covariance alignment between student features of a
// source batch and a target batch.
LossReport train_student(const Model& teacher, Model& student, const DomainDataset& data, const TrainConfig& cfg,
                         double threshold);

struct BatchLosses {
  double l_soft = 0.0;
  double l_dc = 0.0;
  std::size_t selected = 0;
};

// One distillation objective evaluation on a source batch and a target batch
// (train-mode student over the concatenated batch). With `accumulate` the
// gradient of l_soft + lambda * l_dc is added to the student's Param::grad.
BatchLosses distill_batch(const Model& teacher, Model& student, const Tensor& source_x, const Tensor& target_x,
                          const TrainConfig& cfg, double threshold, bool accumulate);

struct PipelineResult {
  Model student1;
  Model student2;
  LossReport stage1;
  LossReport stage2;
};

// Stage 1: teacher -> student1 at threshold1. Stage 2: frozen student1 ->
// freshly initialized student2 at threshold2.
PipelineResult run_pipeline(const Model& teacher, const ModelSpec& student_spec, const DomainDataset& data,
                            const TrainConfig& cfg);

// `key = value` text, '#' comments. Keys: lambda, threshold1, threshold2,
// temperature, optimizer, epochs, batch_size, seed, eta0, alpha, beta,
// dataset, teacher_epochs, teacher, student, and the synthetic set sizes
// source_samples, target_samples, eval_samples.
struct TrainJob {
  TrainConfig train;
  std::string dataset = "synthetic";
  int teacher_epochs = 10;
  ModelSpec teacher;
  ModelSpec student;
  GlyphConfig glyphs;
};
TrainJob parse_train_config(const std::string& text, const std::string& base_dir = ".");

// Desk-scale defaults: a narrow ResNet teacher and a dsODENet student.
ModelSpec default_teacher_spec();
ModelSpec default_student_spec();

// JSON: {"classes", "shape", "source": {"x", "y"}, "target": {"x"},
// "eval": {"x", "y"}} with x as flat row-major sample arrays.
DomainDataset load_dataset_file(const std::string& path);
void save_dataset_file(const DomainDataset& data, const std::string& path);

}  // namespace odeforge
