#include "odeforge/tensor_io.hpp"

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "odeforge/error.hpp"

namespace odeforge {

std::string tensor_to_json(const Tensor& t) {
  nlohmann::json j;
  j["shape"] = t.shape();
  j["data"] = t.vec();
  return j.dump();
}

Tensor tensor_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("tensor file is not valid JSON", e.byte, "json");
  }
  if (!j.is_object() || !j.contains("shape") || !j["shape"].is_array())
    throw ParseError("tensor file needs a 'shape' array", 0, "shape");
  if (!j.contains("data") || !j["data"].is_array()) throw ParseError("tensor file needs a 'data' array", 0, "data");
  Shape shape;
  for (const auto& d : j["shape"]) {
    if (!d.is_number_unsigned()) throw ParseError("shape entries must be non-negative integers", 0, "shape");
    shape.push_back(d.get<std::size_t>());
  }
  std::vector<double> data;
  data.reserve(j["data"].size());
  for (const auto& v : j["data"]) {
    if (!v.is_number()) throw ParseError("data entries must be numbers", 0, "data");
    data.push_back(v.get<double>());
  }
  if (data.size() != shape_size(shape))
    throw ShapeError("tensor file holds " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
  return Tensor(shape, std::move(data));
}

std::string tensor_to_text(const Tensor& t) {
  std::string out;
  for (std::size_t i = 0; i < t.rank(); ++i) out += (i ? " " : "") + std::to_string(t.dim(i));
  out += "\n";
  char buf[32];
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", t[i]);
    out += buf;
    out += (i + 1) % 16 == 0 || i + 1 == t.size() ? '\n' : ' ';
  }
  return out;
}

Tensor tensor_from_text(const std::string& text) {
  const auto eol = text.find('\n');
  std::istringstream dims(text.substr(0, eol));
  Shape shape;
  std::string tok;
  while (dims >> tok) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size() || tok[0] == '-') throw ParseError("bad dimension '" + tok + "'", 0, "shape");
    shape.push_back(v);
  }
  if (shape.empty()) throw ParseError("tensor file needs a line of dimensions", 0, "shape");
  std::vector<double> data;
  data.reserve(shape_size(shape));
  if (eol != std::string::npos) {
    const char* p = text.c_str() + eol + 1;
    const char* end = text.c_str() + text.size();
    while (true) {
      while (p < end && std::isspace(static_cast<unsigned char>(*p))) ++p;
      if (p >= end) break;
      char* next = nullptr;
      const double v = std::strtod(p, &next);
      if (next == p) throw ParseError("bad value", static_cast<std::size_t>(p - text.c_str()), "data");
      data.push_back(v);
      p = next;
    }
  }
  if (data.size() != shape_size(shape))
    throw ShapeError("tensor file holds " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
  return Tensor(shape, std::move(data));
}

Tensor load_tensor_file(const std::string& path) {
  const std::string text = read_text_file(path);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') return tensor_from_json(text);
  return tensor_from_text(text);
}

void save_tensor_file(const Tensor& t, const std::string& path) { write_text_file(path, tensor_to_text(t)); }

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InvalidArgument("cannot write '" + path + "'");
  f << text;
  if (!f) throw InvalidArgument("write to '" + path + "' failed");
}

}  // namespace odeforge
