#include "odeforge/emulator.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>

#include "odeforge/error.hpp"

namespace odeforge {

// ---------------------------------------------------------------------------
// WeightImage
// ---------------------------------------------------------------------------

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string bytes(std::size_t n, const char* field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const char* field) const {
    if (n > b_.size() - pos_) throw ParseError("truncated weight image", pos_, field);
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_weights(const std::vector<WeightRecord>& records) {
  std::vector<std::uint8_t> out{'D', 'S', 'O', 'W'};
  put_u32(out, kWeightImageVersion);
  put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    r.tensor.validate();
    put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    put_u32(out, static_cast<std::uint32_t>(r.tensor.shape.size()));
    for (std::size_t d : r.tensor.shape) put_u32(out, static_cast<std::uint32_t>(d));
    put_u32(out, static_cast<std::uint32_t>(r.tensor.fmt.total_bits));
    put_u32(out, static_cast<std::uint32_t>(r.tensor.fmt.frac_bits));
    for (Word w : r.tensor.words) put_u32(out, static_cast<std::uint32_t>(w));
  }
  put_u32(out, crc32_of(out));
  return out;
}

std::vector<std::uint8_t> serialize_weights(const QModel& q) {
  std::vector<WeightRecord> records;
  for_each_array(q, [&](const std::string& name, const QTensor& t) { records.push_back({name, t}); });
  return serialize_weights(records);
}

std::vector<WeightRecord> parse_weights(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) throw ParseError("weight image shorter than header and checksum", bytes.size(), "header");
  const std::size_t body = bytes.size() - 4;
  {
    Reader tail(bytes.subspan(body));
    if (tail.u32("crc32") != crc32_of(bytes.first(body)))
      throw ParseError("checksum mismatch", body, "crc32");
  }
  Reader r(bytes.first(body));
  if (r.bytes(4, "magic") != "DSOW") throw ParseError("bad magic", 0, "magic");
  const std::size_t vpos = r.pos();
  if (r.u32("version") != kWeightImageVersion) throw ParseError("unsupported version", vpos, "version");
  const std::uint32_t count = r.u32("count");
  std::vector<WeightRecord> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    WeightRecord rec;
    const std::uint32_t name_len = r.u32("name_len");
    rec.name = r.bytes(name_len, "name");
    const std::size_t ndim_pos = r.pos();
    const std::uint32_t ndim = r.u32("ndim");
    if (ndim == 0 || ndim > 8) throw ParseError("bad rank " + std::to_string(ndim), ndim_pos, "ndim");
    std::uint64_t total = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::size_t dpos = r.pos();
      const std::uint32_t dim = r.u32("dims");
      if (dim == 0) throw ParseError("zero dimension", dpos, "dims");
      total *= dim;
      if (total > (std::uint64_t{1} << 32)) throw ParseError("array too large", dpos, "dims");
      rec.tensor.shape.push_back(dim);
    }
    const std::size_t fpos = r.pos();
    rec.tensor.fmt.total_bits = static_cast<int>(r.u32("total_bits"));
    rec.tensor.fmt.frac_bits = static_cast<int>(r.u32("frac_bits"));
    try {
      rec.tensor.fmt.validate();
    } catch (const InvalidArgument& e) {
      throw ParseError(e.what(), fpos, "format");
    }
    const std::size_t wpos = r.pos();
    r.need(total * 4, "words");
    rec.tensor.words.resize(total);
    for (auto& w : rec.tensor.words) w = static_cast<Word>(r.u32("words"));
    for (Word w : rec.tensor.words)
      if (w > rec.tensor.fmt.max_word() || w < rec.tensor.fmt.min_word())
        throw ParseError("word outside " + rec.tensor.fmt.name() + " range in '" + rec.name + "'", wpos, "words");
    out.push_back(std::move(rec));
  }
  if (r.pos() != body) throw ParseError("trailing bytes after last record", r.pos(), "count");
  return out;
}

// ---------------------------------------------------------------------------
// Device graph
// ---------------------------------------------------------------------------

std::string to_string(EmulatorMode m) {
  switch (m) {
    case EmulatorMode::idle: return "idle";
    case EmulatorMode::weight_transfer: return "weight_transfer";
    case EmulatorMode::compute: return "compute";
  }
  return "?";
}

Emulator::Emulator(const ModelSpec& spec) : spec_(spec) {
  spec_.validate();
  build_graph();
}

void Emulator::build_graph() {
  auto unit = [](const std::string& name, std::size_t in, std::size_t out, std::size_t stride, bool sep,
                 const std::string& bn) {
    Unit u;
    u.bn = bn;
    if (sep) {
      u.convs.push_back({name + ".depthwise", ConvKind::depthwise, ConvSpec{in, in, 3, stride, 1, false}});
      u.convs.push_back({name + ".pointwise", ConvKind::pointwise, ConvSpec{in, out, 1, 1, 0, false}});
    } else {
      u.convs.push_back({name, ConvKind::standard, ConvSpec{in, out, 3, stride, 1, false}});
    }
    return u;
  };
  const bool ode = spec_.variant != Variant::resnet;
  for (int i = 0; i < spec_.num_blocks; ++i) {
    const std::size_t n = spec_.block_channels(i);
    const bool sep = spec_.block_separable(i);
    Stage s;
    s.residual = true;
    s.with_time = ode;
    s.steps = spec_.iterations;
    s.name = (ode ? "odeblock" : "block") + std::to_string(i + 1);
    const std::size_t in = ode ? n + 1 : n;
    for (int b = 0; b < (ode ? 1 : spec_.iterations); ++b) {
      const std::string body = ode ? s.name : s.name + "." + std::to_string(b);
      s.bodies.push_back({unit(body + ".conv1", in, n, 1, sep, body + ".bn1"), unit(body + ".conv2", in, n, 1, sep, body + ".bn2")});
    }
    stages_.push_back(s);
    if (i + 1 < spec_.num_blocks) {
      Stage d;
      d.residual = false;
      d.name = "downsampling" + std::to_string(i + 1);
      const bool dsep = spec_.downsampling_separable(i);
      d.conv1 = unit(d.name + ".conv1", n, 2 * n, 2, dsep, d.name + ".bn1");
      d.conv2 = unit(d.name + ".conv2", 2 * n, 2 * n, 1, dsep, d.name + ".bn2");
      d.shortcut = {d.name + ".shortcut", ConvKind::standard, ConvSpec{n, 2 * n, 1, 2, 0, true}};
      stages_.push_back(d);
    }
  }

  auto slots = [&](const Unit& u) {
    for (const auto& c : u.convs) {
      manifest_.push_back({c.name + ".weight", weight_shape(c.spec, c.kind), false});
      manifest_.push_back({c.name + ".bias", {c.spec.out_channels}, !c.spec.bias});
    }
    const std::size_t ch = u.convs.back().spec.out_channels;
    manifest_.push_back({u.bn + ".scale", {ch}, true});
    manifest_.push_back({u.bn + ".shift", {ch}, true});
  };
  for (const auto& s : stages_) {
    if (s.residual) {
      manifest_.push_back({s.name + ".h", {1}, false});
      for (const auto& b : s.bodies) {
        slots(b.conv1);
        slots(b.conv2);
      }
    } else {
      slots(s.conv1);
      slots(s.conv2);
      manifest_.push_back({s.shortcut.name + ".weight", weight_shape(s.shortcut.spec, s.shortcut.kind), false});
      manifest_.push_back({s.shortcut.name + ".bias", {s.shortcut.spec.out_channels}, false});
    }
  }
}

void Emulator::select_mode(EmulatorMode m) {
  if (m == EmulatorMode::compute && !loaded_)
    throw ProtocolError("compute mode requested before weights were loaded");
  mode_ = m;
}

std::uint32_t Emulator::load_weights(std::span<const std::uint8_t> stream) {
  if (mode_ == EmulatorMode::compute)
    throw ProtocolError("weight transfer while in compute mode; select weight_transfer first");
  std::map<std::string, QTensor> store;
  try {
    auto records = parse_weights(stream);
    std::size_t at = 0;
    for (auto& rec : records) {
      while (at < manifest_.size() && manifest_[at].name != rec.name) {
        if (!manifest_[at].optional) throw InvalidArgument("missing array '" + manifest_[at].name + "'");
        ++at;
      }
      if (at == manifest_.size()) throw InvalidArgument("unexpected or out-of-order array '" + rec.name + "'");
      if (rec.tensor.shape != manifest_[at].shape)
        throw InvalidArgument("array '" + rec.name + "' has shape " + shape_str(rec.tensor.shape) + ", expected " +
                              shape_str(manifest_[at].shape));
      store.emplace(rec.name, std::move(rec.tensor));
      ++at;
    }
    for (; at < manifest_.size(); ++at)
      if (!manifest_[at].optional) throw InvalidArgument("missing array '" + manifest_[at].name + "'");
    for (const auto& slot : manifest_) {
      const auto dot = slot.name.rfind('.');
      if (slot.name.substr(dot) != ".scale") continue;
      const std::string shift = slot.name.substr(0, dot) + ".shift";
      if (store.count(slot.name) != store.count(shift))
        throw InvalidArgument("batchnorm '" + slot.name.substr(0, dot) + "' needs both scale and shift");
    }
  } catch (const Error& e) {
    last_error_ = e.what();
    return kNak;
  }
  store_ = std::move(store);
  loaded_ = true;
  mode_ = EmulatorMode::weight_transfer;
  last_error_.clear();
  return kAck;
}

const QTensor* Emulator::find(const std::string& name) const {
  const auto it = store_.find(name);
  return it == store_.end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------------------
// Compute datapath. Inputs are copied into a zero-padded frame buffer and
// every kernel tap is evaluated, so the work depends only on the graph.
// ---------------------------------------------------------------------------

QTensor Emulator::run_conv(const QTensor& x, const Conv& c, FixedPointFormat act) {
  const QTensor& w = *find(c.name + ".weight");
  const QTensor* b = find(c.name + ".bias");
  const std::size_t n_in = x.shape[0], h = x.shape[1], wd = x.shape[2];
  if (n_in != c.spec.in_channels) throw ShapeError(c.name + ": channel mismatch in device datapath");
  const std::size_t k = c.spec.kernel, p = c.spec.padding, st = c.spec.stride;
  const std::size_t hp = h + 2 * p, wp = wd + 2 * p;
  std::vector<Word> frame(n_in * hp * wp, 0);
  for (std::size_t n = 0; n < n_in; ++n)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(&x.words[(n * h + y) * wd], wd, &frame[(n * hp + y + p) * wp + p]);
  const std::size_t oh = (hp - k) / st + 1, ow = (wp - k) / st + 1;
  const std::size_t m_out = c.kind == ConvKind::depthwise ? n_in : c.spec.out_channels;
  const int acc_frac = w.fmt.frac_bits + x.fmt.frac_bits;
  QTensor out({m_out, oh, ow}, act);
  for (std::size_t m = 0; m < m_out; ++m) {
    const WideAcc bias = b ? shift_round_even(WideAcc{b->words[m]}, b->fmt.frac_bits - acc_frac) : 0;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        WideAcc acc = bias;
        ++ops_;  // bias load
        if (c.kind == ConvKind::depthwise) {
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx)
              acc += WideAcc{w.words[(m * k + ky) * k + kx]} * frame[(m * hp + oy * st + ky) * wp + ox * st + kx];
          ops_ += k * k;
        } else {
          for (std::size_t n = 0; n < n_in; ++n)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx)
                acc += WideAcc{w.words[((m * n_in + n) * k + ky) * k + kx]} *
                       frame[(n * hp + oy * st + ky) * wp + ox * st + kx];
          ops_ += n_in * k * k;
        }
        out.words[(m * oh + oy) * ow + ox] = requantize(acc, acc_frac, act);
        ++ops_;
      }
  }
  return out;
}

QTensor Emulator::run_unit(QTensor x, const Unit& u, FixedPointFormat act, bool relu) {
  for (const auto& c : u.convs) x = run_conv(x, c, act);
  const QTensor* scale = find(u.bn + ".scale");
  if (scale) {
    const QTensor& shift = *find(u.bn + ".shift");
    const std::size_t plane = x.shape[1] * x.shape[2];
    const int acc_frac = scale->fmt.frac_bits + x.fmt.frac_bits;
    for (std::size_t ch = 0; ch < x.shape[0]; ++ch) {
      const WideAcc s = shift_round_even(WideAcc{shift.words[ch]}, shift.fmt.frac_bits - acc_frac);
      for (std::size_t i = 0; i < plane; ++i) {
        Word& v = x.words[ch * plane + i];
        v = requantize(WideAcc{scale->words[ch]} * v + s, acc_frac, act);
      }
    }
    ops_ += 2 * x.size();
  }
  if (relu) {
    for (Word& v : x.words) v = v < 0 ? 0 : v;
    ops_ += x.size();
  }
  return x;
}

namespace {

QTensor append_time(const QTensor& x, Word t) {
  QTensor out({x.shape[0] + 1, x.shape[1], x.shape[2]}, x.fmt);
  std::copy(x.words.begin(), x.words.end(), out.words.begin());
  std::fill(out.words.begin() + static_cast<std::ptrdiff_t>(x.size()), out.words.end(), t);
  return out;
}

}  // namespace

QTensor Emulator::run_body(const QTensor& z, const Body& b, bool with_time, Word t, FixedPointFormat act) {
  QTensor x = run_unit(with_time ? append_time(z, t) : z, b.conv1, act);
  return run_unit(with_time ? append_time(x, t) : x, b.conv2, act);
}

QTensor Emulator::compute(const QTensor& fmap_in) {
  if (!loaded_) throw ProtocolError("compute request before weights were loaded");
  if (mode_ != EmulatorMode::compute) throw ProtocolError("compute request in " + to_string(mode_) + " mode");
  const Shape want{spec_.base_channels, spec_.input_shape[1], spec_.input_shape[2]};
  if (fmap_in.shape != want)
    throw ShapeError("feature map " + shape_str(fmap_in.shape) + ", device expects " + shape_str(want));
  fmap_in.validate();
  const FixedPointFormat act = fmap_in.fmt;
  ops_ = 0;
  QTensor x = fmap_in;
  for (const auto& s : stages_) {
    if (s.residual) {
      const QTensor& h = *find(s.name + ".h");
      for (int i = 0; i < s.steps; ++i) {
        const Word t = requantize(WideAcc{i} * h.words[0], h.fmt.frac_bits, act);
        const QTensor f = run_body(x, s.bodies[s.with_time ? 0 : i], s.with_time, t, act);
        const int acc_frac = x.fmt.frac_bits + h.fmt.frac_bits;
        for (std::size_t j = 0; j < x.size(); ++j)
          x.words[j] = requantize((WideAcc{x.words[j]} << h.fmt.frac_bits) + WideAcc{h.words[0]} * f.words[j], acc_frac, act);
        ops_ += 2 * x.size();
      }
    } else {
      // no ReLU before the shortcut sum
      const QTensor main = run_unit(run_unit(x, s.conv1, act), s.conv2, act, false);
      const QTensor sc = run_conv(x, s.shortcut, act);
      QTensor y(main.shape, act);
      for (std::size_t j = 0; j < y.size(); ++j) {
        const Word sum = saturate(WideAcc{main.words[j]} + sc.words[j], act);
        y.words[j] = sum < 0 ? 0 : sum;
      }
      ops_ += 2 * y.size();
      x = std::move(y);
    }
  }
  // global average pool, round half to even
  const std::size_t c = x.shape[0], plane = x.shape[1] * x.shape[2];
  QTensor out({c, 1, 1}, act);
  const auto den = static_cast<std::int64_t>(plane);
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::int64_t sum = 0;
    for (std::size_t i = 0; i < plane; ++i) sum += x.words[ch * plane + i];
    std::int64_t q = sum >= 0 ? sum / den : -((-sum + den - 1) / den);  // floor
    const std::int64_t r2 = 2 * (sum - q * den);
    if (r2 > den || (r2 == den && (q % 2 != 0))) ++q;
    out.words[ch] = static_cast<Word>(q);
  }
  ops_ += x.size() + c;
  return out;
}

// ---------------------------------------------------------------------------
// Host side
// ---------------------------------------------------------------------------

HostWeights host_weights(const QModel& q) { return {q.pre_conv, q.pre_bn, q.fc, q.scheme.act_fmt()}; }

QTensor host_preprocess(const Tensor& image, const HostWeights& host) {
  if (image.rank() != 3 || image.dim(0) != host.pre_conv.spec().in_channels)
    throw ShapeError("host pre-processing expects (" + std::to_string(host.pre_conv.spec().in_channels) +
                     ", H, W), got " + shape_str(image.shape()));
  Tensor x = host.pre_conv.forward(image, {}, nullptr);
  if (host.pre_bn) x = host.pre_bn->forward(x);
  return quantize(relu_forward(x), host.act);
}

Tensor host_postprocess(const QTensor& features, const HostWeights& host) {
  if (features.size() != host.fc.in_features())
    throw ShapeError("host post-processing expects " + std::to_string(host.fc.in_features()) + " features, got " +
                     shape_str(features.shape));
  return host.fc.forward(dequantize(features).reshaped({features.size()}), {}, nullptr);
}

}  // namespace odeforge
