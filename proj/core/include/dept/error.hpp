#pragma once

#include <stdexcept>
#include <string>

namespace dept {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define DEPT_DECLARE_ERROR(Name)   \
  class Name : public Error {      \
   public:                         \
    using Error::Error;            \
  }

DEPT_DECLARE_ERROR(ShapeError);
DEPT_DECLARE_ERROR(IndexError);
DEPT_DECLARE_ERROR(LengthError);
DEPT_DECLARE_ERROR(DegenerateInputError);
DEPT_DECLARE_ERROR(ContractError);
DEPT_DECLARE_ERROR(BudgetError);
DEPT_DECLARE_ERROR(RankError);
DEPT_DECLARE_ERROR(TransferError);
DEPT_DECLARE_ERROR(ConfigError);
DEPT_DECLARE_ERROR(TrainingError);
DEPT_DECLARE_ERROR(SampleError);
DEPT_DECLARE_ERROR(CheckpointError);

#undef DEPT_DECLARE_ERROR

}  // namespace dept
