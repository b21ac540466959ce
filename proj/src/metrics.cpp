#include "twins/workbench/metrics.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

namespace twins::workbench {

namespace {

std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

double parse_number(const std::string& s) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw Error("metrics: cannot parse number '" + s + "'");
  return v;
}

}  // namespace

void write_metrics(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  if (history.empty()) throw InvalidArgument("write_metrics: empty history");
  std::ostringstream os;
  os << kMetricsHeader << '\n';
  for (const auto& r : history) {
    os << r.epoch << ',' << format_number(r.lr) << ',' << format_number(r.train_loss) << ','
       << format_number(r.clean_acc) << ',' << format_number(r.pgd_acc) << ',' << format_number(r.grad_norm_mean)
       << ',' << format_number(r.grad_norm_cv) << ',' << format_number(r.weight_dist) << '\n';
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("write_metrics: cannot open " + path.string());
  out << os.str();
  if (!out) throw Error("write_metrics: write failed for " + path.string());
}

std::vector<EpochRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("read_metrics: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw Error("read_metrics: unexpected header in " + path.string());
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 8) throw Error("read_metrics: expected 8 columns, got " + std::to_string(cells.size()));
    EpochRecord r;
    r.epoch = static_cast<int>(parse_number(cells[0]));
    r.lr = parse_number(cells[1]);
    r.train_loss = parse_number(cells[2]);
    r.clean_acc = parse_number(cells[3]);
    r.pgd_acc = parse_number(cells[4]);
    r.grad_norm_mean = parse_number(cells[5]);
    r.grad_norm_cv = parse_number(cells[6]);
    r.weight_dist = parse_number(cells[7]);
    out.push_back(r);
  }
  return out;
}

}  // namespace twins::workbench
