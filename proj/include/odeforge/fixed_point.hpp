#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "odeforge/tensor.hpp"

namespace odeforge {

// Signed two's-complement Q-format: value = word * 2^-frac_bits.
struct FixedPointFormat {
  int total_bits = 24;
  int frac_bits = 16;

  // Q<int_bits>.<frac_bits>; int_bits counts the sign bit.
  static FixedPointFormat q(int int_bits, int frac_bits);

  void validate() const;
  std::int64_t max_word() const { return (std::int64_t{1} << (total_bits - 1)) - 1; }
  std::int64_t min_word() const { return -(std::int64_t{1} << (total_bits - 1)); }
  double resolution() const;
  std::string name() const;

  bool operator==(const FixedPointFormat&) const = default;
};

inline constexpr FixedPointFormat kQ8_16{24, 16};
inline constexpr FixedPointFormat kQ4_16{20, 16};

using Word = std::int32_t;

// Wide accumulator for fixed-point dot products. 128 bits keeps the 2*frac
// product domain exact for every format up to 32 bits and any realistic
// fan-in.
using WideAcc = __int128;

// Round-to-nearest-even of x * 2^frac_bits, saturated to the format range.
// Throws InvalidArgument on NaN. If `saturated` is given it is set when
// clamping happened.
Word quantize(double x, FixedPointFormat fmt, bool* saturated = nullptr);

// Throws InvalidArgument if w is outside the format's word range.
double dequantize(std::int64_t w, FixedPointFormat fmt);

inline WideAcc qmac(WideAcc acc, Word a, Word b) { return acc + WideAcc{a} * WideAcc{b}; }

// Arithmetic shift right by `shift` bits with round-to-nearest-even; a
// negative shift multiplies by 2^-shift.
WideAcc shift_round_even(WideAcc v, int shift);

// Clamp a value already on the output grid to the format's word range.
Word saturate(WideAcc v, FixedPointFormat fmt, bool* saturated = nullptr);

// Rescale an accumulator holding `acc_frac_bits` fraction bits onto `out`.
Word requantize(WideAcc acc, int acc_frac_bits, FixedPointFormat out, bool* saturated = nullptr);

// Store of a qmac chain whose operands were both in `fmt` (2*frac domain).
inline Word store(WideAcc acc, FixedPointFormat fmt, bool* saturated = nullptr) {
  return requantize(acc, 2 * fmt.frac_bits, fmt, saturated);
}

struct QTensor {
  Shape shape;
  std::vector<Word> words;
  FixedPointFormat fmt;

  QTensor() = default;
  QTensor(Shape s, FixedPointFormat f) : shape(std::move(s)), words(shape_size(shape), 0), fmt(f) {}
  QTensor(Shape s, std::vector<Word> w, FixedPointFormat f);

  std::size_t size() const { return words.size(); }
  // Throws if the word count mismatches the shape or any word is out of range.
  void validate() const;

  bool operator==(const QTensor&) const = default;
};

// Elementwise quantize; adds the number of clamped elements to *saturations.
QTensor quantize(const Tensor& t, FixedPointFormat fmt, std::size_t* saturations = nullptr);
Tensor dequantize(const QTensor& q);

// Number of words sitting exactly at either range bound.
std::size_t count_at_bounds(const QTensor& q);

}  // namespace odeforge
