#pragma once

#include <stdexcept>
#include <string>

namespace wf {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes:
// config_error -> 2, data_error -> 3, numeric/training errors -> 4.
struct dimension_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct contract_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct domain_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct sampling_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct training_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace wf
