#include <charconv>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>

#include "safelayer/errors.hpp"
#include "safelayer/qp.hpp"

namespace safelayer::qp {
namespace {

void put(std::ostream& out, const char* name, const MatrixXd& m) {
  out << name << '=';
  bool first = true;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (!first) out << ',';
      out << std::setprecision(17) << m(i, j);
      first = false;
    }
  out << '\n';
}

std::map<std::string, std::string> read_records(std::istream& in) {
  std::map<std::string, std::string> rec;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidProblem("dump line without '=': " + line);
    rec[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return rec;
}

const std::string& field(const std::map<std::string, std::string>& rec,
                         const std::string& name) {
  auto it = rec.find(name);
  if (it == rec.end()) throw InvalidProblem("dump is missing field '" + name + "'");
  return it->second;
}

std::vector<double> parse_values(const std::string& text, const std::string& name) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw InvalidProblem("field '" + name + "' has a malformed number: " + tok);
    }
  }
  return v;
}

MatrixXd parse_matrix(const std::map<std::string, std::string>& rec, const std::string& name,
                      Eigen::Index rows, Eigen::Index cols) {
  const auto v = parse_values(field(rec, name), name);
  if (static_cast<Eigen::Index>(v.size()) != rows * cols)
    throw InvalidProblem("field '" + name + "' has " + std::to_string(v.size()) +
                         " values, expected " + std::to_string(rows * cols));
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = v[i * cols + j];
  return m;
}

Eigen::Index parse_dim(const std::map<std::string, std::string>& rec, const std::string& name) {
  const std::string& s = field(rec, name);
  long long value = -1;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || value < 0)
    throw InvalidProblem("field '" + name + "' must be a non-negative integer");
  return static_cast<Eigen::Index>(value);
}

}  // namespace

void write_problem(std::ostream& out, const Problem& p) {
  out << "n_x=" << p.num_vars() << '\n'
      << "n_in=" << p.num_ineq() << '\n'
      << "n_eq=" << p.num_eq() << '\n';
  put(out, "P", p.P);
  put(out, "q", p.q);
  put(out, "G", p.G);
  put(out, "h", p.h);
  put(out, "A", p.A);
  put(out, "b", p.b);
}

void write_solution(std::ostream& out, const Solution& s) {
  put(out, "x_star", s.x);
  put(out, "s", s.s);
  put(out, "z", s.z);
  put(out, "y", s.y);
  out << "kkt_residual=" << std::setprecision(17) << s.kkt_residual << '\n'
      << "iterations=" << s.iterations << '\n';
}

Problem read_problem(std::istream& in) {
  const auto rec = read_records(in);
  const Eigen::Index n = parse_dim(rec, "n_x");
  const Eigen::Index m = parse_dim(rec, "n_in");
  const Eigen::Index e = parse_dim(rec, "n_eq");
  Problem p;
  p.P = parse_matrix(rec, "P", n, n);
  p.q = parse_matrix(rec, "q", n, 1);
  p.G = parse_matrix(rec, "G", m, n);
  p.h = parse_matrix(rec, "h", m, 1);
  p.A = parse_matrix(rec, "A", e, n);
  p.b = parse_matrix(rec, "b", e, 1);
  return p;
}

Solution read_solution(std::istream& in) {
  const auto rec = read_records(in);
  auto vec = [&](const std::string& name) {
    const auto v = parse_values(field(rec, name), name);
    return VectorXd(Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  Solution s;
  s.x = vec("x_star");
  s.s = vec("s");
  s.z = vec("z");
  s.y = vec("y");
  s.kkt_residual = parse_values(field(rec, "kkt_residual"), "kkt_residual").at(0);
  s.iterations = static_cast<int>(parse_dim(rec, "iterations"));
  return s;
}

}  // namespace safelayer::qp
