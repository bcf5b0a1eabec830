#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "odeforge/fixed_point.hpp"
#include "odeforge/model.hpp"
#include "odeforge/quantizer.hpp"

namespace odeforge {

// WeightImage byte stream, little-endian throughout:
//   "DSOW" | u32 version | u32 count
//   count x { u32 name_len | name | u32 ndim | u32 dims[ndim] |
//             u32 total_bits | u32 frac_bits | i32 words[prod(dims)] }
//   u32 crc32 of every preceding byte
inline constexpr std::uint32_t kWeightImageVersion = 1;

struct WeightRecord {
  std::string name;
  QTensor tensor;
};

std::vector<std::uint8_t> serialize_weights(const std::vector<WeightRecord>& records);
// Every device array of the model, in graph declaration order.
std::vector<std::uint8_t> serialize_weights(const QModel& q);
// Throws ParseError naming the byte offset and field.
std::vector<WeightRecord> parse_weights(std::span<const std::uint8_t> bytes);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

enum class EmulatorMode { idle, weight_transfer, compute };
std::string to_string(EmulatorMode m);

// Functional model of the accelerator core: a weight-transfer mode that
// accepts a WeightImage and a compute mode that maps one entry feature map to
// the pooled feature vector.
class Emulator {
 public:
  static constexpr std::uint32_t kAck = 1;
  static constexpr std::uint32_t kNak = 0;

  explicit Emulator(const ModelSpec& spec);

  EmulatorMode mode() const { return mode_; }
  bool loaded() const { return loaded_; }
  const ModelSpec& spec() const { return spec_; }

  // compute requires loaded weights; other transitions are always allowed.
  // Throws ProtocolError on a rejected transition.
  void select_mode(EmulatorMode m);

  // Only in idle or weight_transfer mode (ProtocolError otherwise). Returns
  // kAck and enters weight_transfer on success; a malformed or mismatching
  // stream returns kNak and leaves the state untouched.
  std::uint32_t load_weights(std::span<const std::uint8_t> stream);
  // Reason for the last kNak.
  const std::string& last_error() const { return last_error_; }

  // Requires compute mode. Input (base, H, W) -> output (d, 1, 1).
  QTensor compute(const QTensor& fmap_in);

  // Primitive operations (MACs, adds, compares, shifts) of the last compute.
  std::uint64_t last_ops() const { return ops_; }

  struct Slot {
    std::string name;
    Shape shape;
    bool optional;
  };
  // Arrays the device accepts, in declaration order.
  const std::vector<Slot>& manifest() const { return manifest_; }

 private:
  struct Conv {
    std::string name;
    ConvKind kind;
    ConvSpec spec;
  };
  struct Unit {
    std::vector<Conv> convs;
    std::string bn;
  };
  struct Body {
    Unit conv1, conv2;
  };
  struct Stage {
    bool residual = true;
    std::string name;
    bool with_time = true;
    int steps = 1;
    std::vector<Body> bodies;  // residual
    Unit conv1, conv2;         // downsampling
    Conv shortcut;
  };

  void build_graph();
  QTensor run_conv(const QTensor& x, const Conv& c, FixedPointFormat act);
  QTensor run_unit(QTensor x, const Unit& u, FixedPointFormat act, bool relu = true);
  QTensor run_body(const QTensor& z, const Body& b, bool with_time, Word t, FixedPointFormat act);
  const QTensor* find(const std::string& name) const;

  ModelSpec spec_;
  std::vector<Stage> stages_;
  std::vector<Slot> manifest_;
  EmulatorMode mode_ = EmulatorMode::idle;
  bool loaded_ = false;
  std::map<std::string, QTensor> store_;
  std::string last_error_;
  std::uint64_t ops_ = 0;
};

// Host side of the contract (float pre/post layers).
struct HostWeights {
  ConvLayer pre_conv;
  std::optional<BatchNormLayer> pre_bn;
  LinearLayer fc;
  FixedPointFormat act = kQ8_16;
};

HostWeights host_weights(const QModel& q);
QTensor host_preprocess(const Tensor& image, const HostWeights& host);
Tensor host_postprocess(const QTensor& features, const HostWeights& host);

}  // namespace odeforge
