#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace coevo::gradcheck {

struct BatteryEntry {
  std::string name;
  int configs = 0;
  double worst_rel_error = 0.0;
  bool pass = false;
};

// Validates every analytic gradient in the project against central finite
// differences on small randomized setups: the three anchoring losses and
// their weighted total (tokens), the prompt encoder (tokens), and the
// identity/triplet/alignment losses plus the full two-view local objective
// (encoder and head parameters).
std::vector<BatteryEntry> run_battery(int configs_per_loss, std::uint64_t seed,
                                      double epsilon = 1e-5,
                                      double tolerance = 1e-4);

std::string format_battery(const std::vector<BatteryEntry>& entries);

}  // namespace coevo::gradcheck
