#pragma once

#include <string>

#include "odeforge/tensor.hpp"

namespace odeforge {

// {"shape": [..], "data": [..]} with data in row-major order.
std::string tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const std::string& text);

// Text form: a line of dims, then the row-major values separated by
// whitespace. Round trips exactly (17 significant digits).
std::string tensor_to_text(const Tensor& t);
Tensor tensor_from_text(const std::string& text);

// Reads either form; writes the text form.
Tensor load_tensor_file(const std::string& path);
void save_tensor_file(const Tensor& t, const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace odeforge
