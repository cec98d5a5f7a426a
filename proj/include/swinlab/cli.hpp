#pragma once

#include <iosfwd>
#include <vector>

#include "swinlab/tensor.hpp"

namespace swinlab {

/// Exit codes of every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitDiverged = 2;
inline constexpr int kExitCheckFailed = 3;

int run_cli(int argc, char** argv);

struct BiasRow {
  Index head = 0;
  Index dx = 0;
  Index dy = 0;
  double value = 0.0;
};

/// `head,dx,dy,value` rows of one head of a [(2M-1)^2, heads] table, in
/// table order (dy outer, dx inner).
void write_bias_csv(std::ostream& out, const Tensor& table, Index window, Index head);
std::vector<BiasRow> read_bias_csv(std::istream& in);

/// Linear and log extrapolation ratios as `linear=1.14 log=0.33`.
std::string format_ratio_line(Index train_window, Index target_window);

}  // namespace swinlab
