#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <variant>

namespace ehrw {

using FeatureId = std::string;

// Modality order is fixed; verbalization emits sections in this order.
enum class Modality : int {
  Demographic = 0,
  Diagnosis = 1,
  Lab = 2,
  Medication = 3,
  Procedure = 4,
  Other = 5,
};
constexpr int kNumModalities = 6;

enum class ValueKind { Numeric, Categorical };

// A tuple value: numeric, categorical string, or missing.
using Value = std::variant<std::monostate, double, std::string>;

inline bool is_missing(const Value& v) { return std::holds_alternative<std::monostate>(v); }
inline bool is_numeric(const Value& v) { return std::holds_alternative<double>(v); }

const char* modality_name(Modality m);
Modality modality_from_name(const std::string& name);
const char* value_kind_name(ValueKind k);
ValueKind value_kind_from_name(const std::string& name);

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnknownFeatureError : Error { using Error::Error; };
struct DegenerateLabelsError : Error { using Error::Error; };
struct NotASubsetError : Error { using Error::Error; };
struct MissingScoreTableError : Error { using Error::Error; };
struct NonFiniteLossError : Error { using Error::Error; };
struct EmptySampleError : Error { using Error::Error; };
struct InfeasibleSpecError : Error { using Error::Error; };
struct MissingAttributeError : Error { using Error::Error; };
struct EndpointUnavailableError : Error { using Error::Error; };
struct MalformedResponseError : Error { using Error::Error; };
struct PreconditionError : Error { using Error::Error; };

struct ParseError : Error {
  ParseError(std::size_t line, const std::string& what)
      : Error("parse error at line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

struct SchemaError : Error {
  SchemaError(const std::string& field_path, const std::string& what)
      : Error("schema error at " + field_path + ": " + what), field(field_path) {}
  std::string field;
};

struct MissingArtifactError : Error {
  explicit MissingArtifactError(const std::string& path)
      : Error("missing artifact: " + path), path(path) {}
  std::string path;
};

struct ConfigError : Error { using Error::Error; };

}  // namespace ehrw
