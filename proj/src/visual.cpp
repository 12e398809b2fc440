#include "mscl/visual.hpp"

#include <cstdio>
#include <fstream>

#include "mscl/error.hpp"

namespace mscl {

void write_history_csv(const std::filesystem::path& path, const TrainHistory& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'", 0);
  out << "epoch,mean_loss\n";
  char buf[64];
  for (std::size_t i = 0; i < history.epoch_mean_loss.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, history.epoch_mean_loss[i]);
    out << buf;
  }
}

}  // namespace mscl
