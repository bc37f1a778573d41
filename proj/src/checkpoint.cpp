#include "caseq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace caseq {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr const char* kMagic = "caseq-checkpoint";

std::string read_line(std::istream& in, const char* what) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(std::string("checkpoint: missing ") + what);
  return line;
}

}  // namespace

void save_checkpoint(std::ostream& out, const CaseqConfig& config, const CaseqParams& params) {
  check_params(config, params);
  std::size_t count = 0;
  params.visit([&count](const std::string&, const Matrix&) { ++count; });
  out << kMagic << ' ' << kCheckpointVersion << '\n';
  out << "config " << config_to_json(config) << '\n';
  out << "tensors " << count << '\n';
  params.visit([&out](const std::string& name, const Matrix& m) {
    out << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
    out << '\n';
  });
  if (!out) throw IoError("checkpoint: write failed");
}

void save_checkpoint(const std::filesystem::path& path, const CaseqConfig& config,
                     const CaseqParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  save_checkpoint(out, config, params);
}

Checkpoint load_checkpoint(std::istream& in) {
  std::istringstream header(read_line(in, "header"));
  std::string magic;
  int version = 0;
  header >> magic >> version;
  if (magic != kMagic) throw ParseError("checkpoint: bad magic");
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint: unsupported format version " + std::to_string(version));

  const std::string cfg_line = read_line(in, "config");
  if (cfg_line.rfind("config ", 0) != 0) throw ParseError("checkpoint: expected config line");
  Checkpoint ck;
  ck.config = config_from_json(cfg_line.substr(7));
  ck.params = zero_params(ck.config);

  std::istringstream count_line(read_line(in, "tensor count"));
  std::string tag;
  std::size_t count = 0;
  count_line >> tag >> count;
  if (tag != "tensors") throw ParseError("checkpoint: expected tensor count");

  std::size_t seen = 0;
  ck.params.visit([&](const std::string& name, Matrix& m) {
    std::istringstream meta(read_line(in, "tensor header"));
    std::string got_name;
    Index rows = -1, cols = -1;
    meta >> got_name >> rows >> cols;
    if (got_name != name || rows != m.rows() || cols != m.cols())
      throw ParseError("checkpoint: expected tensor " + name + " " + shape_of(m) + ", found " +
                       got_name + " " + shape_string(rows, cols));
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (in.get() != '\n') throw ParseError("checkpoint: truncated tensor " + name);
    ++seen;
  });
  if (seen != count) throw ParseError("checkpoint: tensor count mismatch");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  return load_checkpoint(in);
}

}  // namespace caseq
