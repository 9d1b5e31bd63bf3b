#pragma once

#include "cryoguide/core.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace cryoguide {

struct Element {
  std::string symbol;  // upper case, e.g. "C", "SE"
  int atomic_number = 0;

  bool operator==(const Element&) const = default;
};

namespace detail {

struct ElementEntry {
  std::string_view symbol;
  int z;
};

// Elements that occur in macromolecular models.
inline constexpr std::array<ElementEntry, 30> kElements{{
    {"H", 1},   {"D", 1},   {"HE", 2},  {"LI", 3},  {"B", 5},   {"C", 6},
    {"N", 7},   {"O", 8},   {"F", 9},   {"NA", 11}, {"MG", 12}, {"AL", 13},
    {"SI", 14}, {"P", 15},  {"S", 16},  {"CL", 17}, {"K", 19},  {"CA", 20},
    {"MN", 25}, {"FE", 26}, {"CO", 27}, {"NI", 28}, {"CU", 29}, {"ZN", 30},
    {"SE", 34}, {"BR", 35}, {"I", 53},  {"CD", 48}, {"HG", 80}, {"W", 74},
}};

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

// Fixed-column field; columns are 1-based inclusive as in the PDB format guide.
inline std::string_view column(std::string_view line, std::size_t first, std::size_t last) {
  if (line.size() < first) return {};
  const std::size_t b = first - 1;
  const std::size_t n = std::min(last, line.size()) - b;
  return line.substr(b, n);
}

inline std::optional<double> parse_double(std::string_view field) {
  const std::string t = trim(field);
  if (t.empty()) return std::nullopt;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || ptr != t.data() + t.size()) return std::nullopt;
  return v;
}

inline std::optional<int> parse_int(std::string_view field) {
  const std::string t = trim(field);
  if (t.empty()) return std::nullopt;
  int v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || ptr != t.data() + t.size()) return std::nullopt;
  return v;
}

}  // namespace detail

/// Look up an element by symbol (case-insensitive). Returns nullopt for unknown symbols.
inline std::optional<Element> element_from_symbol(std::string_view symbol) {
  const std::string s = detail::upper(detail::trim(symbol));
  for (const auto& e : detail::kElements)
    if (e.symbol == s) return Element{s, e.z};
  return std::nullopt;
}

inline Element element_or_throw(std::string_view symbol) {
  auto e = element_from_symbol(symbol);
  if (!e) throw FormatError("unknown element symbol '" + std::string(symbol) + "'");
  return *e;
}

struct Atom {
  Element element;
  Vec3 pos = Vec3::Zero();
  std::string chain_id = "A";
  int res_index = 1;
  std::string res_name = "UNK";
  std::string atom_name;
};

struct AtomicModel {
  std::vector<Atom> atoms;
  std::string provenance;

  std::size_t size() const { return atoms.size(); }
  bool empty() const { return atoms.empty(); }

  Coords positions() const {
    Coords out;
    out.reserve(atoms.size());
    for (const auto& a : atoms) out.push_back(a.pos);
    return out;
  }

  /// Copy of this model with coordinates replaced; metadata and order kept.
  AtomicModel with_positions(std::span<const Vec3> pos) const {
    if (pos.size() != atoms.size()) throw GeometryError("with_positions: atom count mismatch");
    AtomicModel out = *this;
    for (std::size_t i = 0; i < pos.size(); ++i) out.atoms[i].pos = pos[i];
    return out;
  }
};

namespace detail {

// Element from atom-name columns 13-16 when columns 77-78 are blank.
inline std::optional<Element> infer_element(std::string_view name_field) {
  std::string name(name_field);
  name.resize(4, ' ');
  // Two-letter symbols are left-justified in column 13 ("FE  "); one-letter
  // symbols sit in column 14 (" CA ").
  if (std::isalpha(static_cast<unsigned char>(name[0])) &&
      std::isalpha(static_cast<unsigned char>(name[1]))) {
    if (auto e = element_from_symbol(name.substr(0, 2)); e && e->symbol != "CA") return e;
  }
  for (char c : name) {
    if (std::isalpha(static_cast<unsigned char>(c))) return element_from_symbol(std::string(1, c));
  }
  return std::nullopt;
}

}  // namespace detail

/// Parse PDB text. Keeps ATOM records of the first MODEL with altloc ' ' or 'A' and
/// occupancy > 0; drops HETATM records and hydrogens.
inline AtomicModel parse_pdb(std::istream& in, std::string provenance = {}) {
  AtomicModel model;
  model.provenance = std::move(provenance);
  std::string line;
  std::size_t line_no = 0;
  bool seen_model = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string_view rec = detail::column(line, 1, 6);
    if (rec.starts_with("MODEL")) {
      if (seen_model) break;
      seen_model = true;
      continue;
    }
    if (rec.starts_with("ENDMDL")) break;
    if (rec != "ATOM  " && rec != "ATOM") continue;

    const auto where = [&] { return " (line " + std::to_string(line_no) + ")"; };
    if (line.size() < 54) throw FormatError("truncated ATOM record" + where());

    const char altloc = line[16];
    if (altloc != ' ' && altloc != 'A') continue;

    const auto x = detail::parse_double(detail::column(line, 31, 38));
    const auto y = detail::parse_double(detail::column(line, 39, 46));
    const auto z = detail::parse_double(detail::column(line, 47, 54));
    if (!x || !y || !z) throw FormatError("unparseable coordinate field" + where());
    const Vec3 pos(*x, *y, *z);
    if (!pos.allFinite()) throw FormatError("non-finite coordinate" + where());

    const auto occ = detail::parse_double(detail::column(line, 55, 60));
    if (occ && *occ <= 0.0) continue;

    std::optional<Element> element;
    if (const std::string sym = detail::trim(detail::column(line, 77, 78)); !sym.empty()) {
      element = element_from_symbol(sym);
    }
    if (!element) element = detail::infer_element(detail::column(line, 13, 16));
    if (!element) throw FormatError("cannot determine element" + where());
    if (element->atomic_number == 1) continue;

    const auto res_index = detail::parse_int(detail::column(line, 23, 26));
    if (!res_index) throw FormatError("unparseable residue number" + where());

    Atom atom;
    atom.element = *element;
    atom.pos = pos;
    atom.atom_name = detail::trim(detail::column(line, 13, 16));
    atom.res_name = detail::trim(detail::column(line, 18, 20));
    atom.chain_id = std::string(1, line[21]);
    atom.res_index = *res_index;
    model.atoms.push_back(std::move(atom));
  }
  if (model.atoms.empty()) throw EmptySelectionError("no ATOM records in " + (model.provenance.empty() ? std::string("input") : model.provenance));
  return model;
}

inline AtomicModel parse_pdb_string(const std::string& text, std::string provenance = {}) {
  std::istringstream in(text);
  return parse_pdb(in, std::move(provenance));
}

inline AtomicModel read_pdb(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_pdb(in, path);
}

namespace detail {

inline std::string format_coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%8.3f", v);
  std::string s(buf);
  if (s.size() > 8) throw GeometryError("coordinate " + s + " overflows the PDB %8.3f field");
  return s;
}

inline std::string format_atom_name(const Atom& a) {
  std::string name = a.atom_name.substr(0, 4);
  if (name.size() < 4 && a.element.symbol.size() == 1) name = " " + name;
  name.resize(4, ' ');
  return name;
}

}  // namespace detail

/// Emit fixed-width ATOM records with a TER after each chain and a closing END.
inline void format_pdb(const AtomicModel& model, std::ostream& out) {
  if (model.empty()) throw EmptySelectionError("write_pdb: empty model");
  // Format everything first so an overflow leaves the stream untouched.
  std::string text;
  char buf[128];
  int serial = 0;
  for (std::size_t i = 0; i < model.atoms.size(); ++i) {
    const Atom& a = model.atoms[i];
    ++serial;
    const std::string xs = detail::format_coord(a.pos.x());
    const std::string ys = detail::format_coord(a.pos.y());
    const std::string zs = detail::format_coord(a.pos.z());
    const char chain = a.chain_id.empty() ? ' ' : a.chain_id[0];
    std::snprintf(buf, sizeof buf, "ATOM  %5d %4s %3.3s %c%4d    %s%s%s%6.2f%6.2f          %2s\n",
                  serial % 100000, detail::format_atom_name(a).c_str(), a.res_name.c_str(), chain,
                  a.res_index % 10000, xs.c_str(), ys.c_str(), zs.c_str(), 1.0, 0.0,
                  a.element.symbol.c_str());
    text += buf;
    const bool chain_ends = i + 1 == model.atoms.size() || model.atoms[i + 1].chain_id != a.chain_id;
    if (chain_ends) {
      ++serial;
      std::snprintf(buf, sizeof buf, "TER   %5d      %3.3s %c%4d\n", serial % 100000, a.res_name.c_str(), chain,
                    a.res_index % 10000);
      text += buf;
    }
  }
  text += "END\n";
  out << text;
}

inline void write_pdb(const AtomicModel& model, const std::string& path) {
  std::ostringstream text;
  format_pdb(model, text);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << text.str();
  if (!out) throw IoError("write failed for " + path);
}

inline AtomicModel ca_subset(const AtomicModel& model) {
  AtomicModel out;
  out.provenance = model.provenance;
  for (const auto& a : model.atoms)
    if (a.atom_name == "CA") out.atoms.push_back(a);
  return out;
}

inline AtomicModel residue_range_subset(const AtomicModel& model, std::string_view chain, int lo, int hi) {
  if (lo > hi) throw GeometryError("residue_range_subset: lo > hi");
  AtomicModel out;
  out.provenance = model.provenance;
  for (const auto& a : model.atoms)
    if (a.chain_id == chain && a.res_index >= lo && a.res_index <= hi) out.atoms.push_back(a);
  return out;
}

}  // namespace cryoguide
