#pragma once

#include <stdexcept>
#include <cstdint>
#include <string>

namespace mtclip {

// Every failure raised by the library carries a category so the CLI can
// print a categorized error line and tests can match on the kind.
enum class ErrorKind {
  kDimension,
  kArgument,
  kConfig,
  kInput,
  kFormat,
  kCheckpoint,
  kMetric,
  kReport,
  kUsage,
  kNumeric,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

#define MTCLIP_DEFINE_ERROR(Name, Kind)                                    \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

MTCLIP_DEFINE_ERROR(DimensionError, kDimension)
MTCLIP_DEFINE_ERROR(ArgumentError, kArgument)
MTCLIP_DEFINE_ERROR(ConfigError, kConfig)
MTCLIP_DEFINE_ERROR(InputError, kInput)
MTCLIP_DEFINE_ERROR(CheckpointError, kCheckpoint)
MTCLIP_DEFINE_ERROR(MetricError, kMetric)
MTCLIP_DEFINE_ERROR(ReportError, kReport)
MTCLIP_DEFINE_ERROR(UsageError, kUsage)
MTCLIP_DEFINE_ERROR(NumericError, kNumeric)

#undef MTCLIP_DEFINE_ERROR

// Format errors remember the byte offset at which decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(ErrorKind::kFormat,
              what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace mtclip
