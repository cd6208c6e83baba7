#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace msd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MSD_DEFINE_ERROR(Name)      \
  class Name : public Error {       \
   public:                          \
    using Error::Error;             \
  }

MSD_DEFINE_ERROR(DimensionError);
MSD_DEFINE_ERROR(RankError);
MSD_DEFINE_ERROR(ParameterError);
MSD_DEFINE_ERROR(DistributionError);
MSD_DEFINE_ERROR(DegenerateRowError);
MSD_DEFINE_ERROR(NumericalError);
MSD_DEFINE_ERROR(EvaluationError);
MSD_DEFINE_ERROR(ConfigError);
MSD_DEFINE_ERROR(CapacityError);
MSD_DEFINE_ERROR(NormalizationError);
MSD_DEFINE_ERROR(EmptyQueueError);
MSD_DEFINE_ERROR(IndexError);
MSD_DEFINE_ERROR(PlanError);
MSD_DEFINE_ERROR(WarmupError);
MSD_DEFINE_ERROR(StateError);
MSD_DEFINE_ERROR(ScheduleError);
MSD_DEFINE_ERROR(DegenerateBatchError);
MSD_DEFINE_ERROR(DegenerateLabelsError);
MSD_DEFINE_ERROR(IoError);

#undef MSD_DEFINE_ERROR

/// Malformed binary file. Carries the byte offset where decoding stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace msd
