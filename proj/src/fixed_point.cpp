#include "odeforge/fixed_point.hpp"

#include <cmath>

#include "odeforge/error.hpp"

namespace odeforge {

FixedPointFormat FixedPointFormat::q(int int_bits, int frac_bits) {
  FixedPointFormat f{int_bits + frac_bits, frac_bits};
  f.validate();
  return f;
}

void FixedPointFormat::validate() const {
  if (total_bits < 8 || total_bits > 32)
    throw InvalidArgument("fixed-point total_bits must be in [8, 32], got " + std::to_string(total_bits));
  if (frac_bits < 0 || frac_bits > total_bits - 1)
    throw InvalidArgument("fixed-point frac_bits must be in [0, " + std::to_string(total_bits - 1) + "], got " +
                          std::to_string(frac_bits));
}

double FixedPointFormat::resolution() const { return std::ldexp(1.0, -frac_bits); }

std::string FixedPointFormat::name() const {
  return "Q" + std::to_string(total_bits - frac_bits) + "." + std::to_string(frac_bits);
}

Word quantize(double x, FixedPointFormat fmt, bool* saturated) {
  if (std::isnan(x)) throw InvalidArgument("quantize: NaN input");
  const double scaled = std::ldexp(x, fmt.frac_bits);
  const auto hi = static_cast<double>(fmt.max_word());
  const auto lo = static_cast<double>(fmt.min_word());
  double r = std::nearbyint(scaled);  // default rounding mode: nearest-even
  bool sat = false;
  if (r > hi) {
    r = hi;
    sat = true;
  } else if (r < lo) {
    r = lo;
    sat = true;
  }
  if (saturated) *saturated = sat;
  return static_cast<Word>(r);
}

double dequantize(std::int64_t w, FixedPointFormat fmt) {
  if (w > fmt.max_word() || w < fmt.min_word())
    throw InvalidArgument("dequantize: word " + std::to_string(w) + " outside " + fmt.name() + " range");
  return std::ldexp(static_cast<double>(w), -fmt.frac_bits);
}

WideAcc shift_round_even(WideAcc v, int shift) {
  if (shift <= 0) return v * (WideAcc{1} << -shift);
  const WideAcc q = v >> shift;  // floor
  const WideAcc rem = v - (q << shift);
  const WideAcc half = WideAcc{1} << (shift - 1);
  if (rem > half || (rem == half && (q & 1) != 0)) return q + 1;
  return q;
}

Word saturate(WideAcc v, FixedPointFormat fmt, bool* saturated) {
  bool sat = false;
  if (v > fmt.max_word()) {
    v = fmt.max_word();
    sat = true;
  } else if (v < fmt.min_word()) {
    v = fmt.min_word();
    sat = true;
  }
  if (saturated) *saturated = sat;
  return static_cast<Word>(v);
}

Word requantize(WideAcc acc, int acc_frac_bits, FixedPointFormat out, bool* saturated) {
  return saturate(shift_round_even(acc, acc_frac_bits - out.frac_bits), out, saturated);
}

QTensor::QTensor(Shape s, std::vector<Word> w, FixedPointFormat f)
    : shape(std::move(s)), words(std::move(w)), fmt(f) {
  validate();
}

void QTensor::validate() const {
  fmt.validate();
  if (shape_size(shape) != words.size())
    throw ShapeError("qtensor shape " + shape_str(shape) + " does not match " + std::to_string(words.size()) +
                     " words");
  for (auto w : words)
    if (w > fmt.max_word() || w < fmt.min_word())
      throw InvalidArgument("qtensor word " + std::to_string(w) + " outside " + fmt.name() + " range");
}

QTensor quantize(const Tensor& t, FixedPointFormat fmt, std::size_t* saturations) {
  fmt.validate();
  QTensor q(t.shape(), fmt);
  std::size_t sat_count = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    bool sat = false;
    q.words[i] = quantize(t[i], fmt, &sat);
    sat_count += sat;
  }
  if (saturations) *saturations += sat_count;
  return q;
}

Tensor dequantize(const QTensor& q) {
  Tensor t(q.shape);
  for (std::size_t i = 0; i < q.size(); ++i) t[i] = dequantize(q.words[i], q.fmt);
  return t;
}

std::size_t count_at_bounds(const QTensor& q) {
  std::size_t n = 0;
  for (auto w : q.words) n += (w == q.fmt.max_word() || w == q.fmt.min_word());
  return n;
}

}  // namespace odeforge
