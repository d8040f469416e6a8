#include "mulferl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mulferl/errors.hpp"

namespace mulferl {

namespace {

constexpr std::string_view kCheckpointMagic = "MFRL1\n";
constexpr std::string_view kStateMagic = "MFRS1\n";

void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

void put_matrix(std::string& out, const RowMatrix<double>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(m.data()[i]));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void expect(std::string_view literal, const char* what) {
    if (bytes_.compare(pos_, literal.size(), literal) != 0) throw IoError(std::string("bad ") + what);
    pos_ += literal.size();
  }
  std::string line() {
    const auto nl = bytes_.find('\n', pos_);
    if (nl == std::string::npos) throw IoError("truncated header");
    std::string s = bytes_.substr(pos_, nl - pos_);
    pos_ = nl + 1;
    return s;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return x;
  }
  void matrix(RowMatrix<double>& m) {
    need(8 * static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<double>(u64());
  }
  void finish() const {
    if (pos_ != bytes_.size()) throw IoError("trailing bytes after payload");
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("truncated payload");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

void put_params(std::string& out, const RowMatrix<double>& trans, const RowMatrix<double>& ctx) {
  put_matrix(out, trans);
  put_matrix(out, ctx);
}

}  // namespace

std::string encode_checkpoint(const Vocab& vocab, const PolicyParams& params) {
  if (params.vocab_size() != static_cast<Eigen::Index>(vocab.size()))
    throw ContractViolation("checkpoint: params shape does not match vocab");
  std::string out(kCheckpointMagic);
  out += "V " + std::to_string(vocab.size()) + "\n";
  for (const auto& s : vocab.symbols()) out += s + "\n";
  put_params(out, params.trans, params.ctx);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  in.expect(kCheckpointMagic, "checkpoint magic");
  const std::string vline = in.line();
  if (vline.rfind("V ", 0) != 0) throw IoError("bad vocab size line");
  std::size_t v = 0;
  try {
    v = std::stoul(vline.substr(2));
  } catch (const std::exception&) {
    throw IoError("bad vocab size line");
  }
  if (v == 0 || v > 1'000'000) throw IoError("implausible vocab size");
  std::vector<std::string> symbols;
  symbols.reserve(v);
  for (std::size_t i = 0; i < v; ++i) symbols.push_back(in.line());
  std::optional<Vocab> vocab;
  try {
    vocab.emplace(std::move(symbols));
  } catch (const std::invalid_argument& e) {
    throw IoError(std::string("bad vocab listing: ") + e.what());
  }
  auto params = PolicyParams::zeros(static_cast<Eigen::Index>(v));
  in.matrix(params.trans);
  in.matrix(params.ctx);
  in.finish();
  return {std::move(*vocab), std::move(params)};
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename to " + path.string() + " failed: " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const Vocab& vocab, const PolicyParams& params) {
  write_file_atomic(path, encode_checkpoint(vocab, params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

void save_trainer_state(const std::filesystem::path& path, const TrainerState& s) {
  std::string out(kStateMagic);
  put_u64(out, static_cast<std::uint64_t>(s.params.vocab_size()));
  put_u64(out, s.step);
  put_u64(out, s.adam_t);
  put_params(out, s.params.trans, s.params.ctx);
  put_params(out, s.ref.trans, s.ref.ctx);
  put_params(out, s.m.trans, s.m.ctx);
  put_params(out, s.v.trans, s.v.ctx);
  write_file_atomic(path, out);
}

TrainerState load_trainer_state(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  Reader in(bytes);
  in.expect(kStateMagic, "trainer state magic");
  const auto v = static_cast<Eigen::Index>(in.u64());
  if (v <= 0 || v > 1'000'000) throw IoError("implausible vocab size in trainer state");
  TrainerState s;
  s.step = in.u64();
  s.adam_t = in.u64();
  s.params = PolicyParams::zeros(v);
  s.ref = PolicyParams::zeros(v);
  s.m = Gradient::zeros(v);
  s.v = Gradient::zeros(v);
  in.matrix(s.params.trans);
  in.matrix(s.params.ctx);
  in.matrix(s.ref.trans);
  in.matrix(s.ref.ctx);
  in.matrix(s.m.trans);
  in.matrix(s.m.ctx);
  in.matrix(s.v.trans);
  in.matrix(s.v.ctx);
  in.finish();
  return s;
}

}  // namespace mulferl
