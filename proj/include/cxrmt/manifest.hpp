#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cxrmt/agreement.hpp"
#include "cxrmt/data.hpp"
#include "cxrmt/error.hpp"
#include "cxrmt/image_io.hpp"

namespace cxrmt {

namespace csv {

// Plain comma-separated rows; fields never contain commas or quotes.
inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  out.push_back(field);
  return out;
}

inline std::string join(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out.push_back(',');
    out += fields[i];
  }
  return out;
}

// Shortest representation that round-trips exactly.
inline std::string format(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based file line of each row

  std::size_t column(const std::string& name, const std::string& file) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw IngestError(file, 1, "missing column '" + name + "'");
  }
};

inline Table read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError(path.string(), 0, "cannot open file");
  Table t;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (t.header.empty()) {
      t.header = split(line);
      continue;
    }
    auto row = split(line);
    if (row.size() != t.header.size())
      throw IngestError(path.string(), n,
                        "expected " + std::to_string(t.header.size()) + " fields, got " + std::to_string(row.size()));
    t.rows.push_back(std::move(row));
    t.line_numbers.push_back(n);
  }
  if (t.header.empty()) throw IngestError(path.string(), 0, "empty file");
  return t;
}

inline void write(const std::filesystem::path& path, const std::vector<std::string>& header,
                  const std::vector<std::vector<std::string>>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << join(header) << '\n';
  for (const auto& r : rows) out << join(r) << '\n';
}

inline double parse_double(const std::string& s, const std::string& file, std::size_t row) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw IngestError(file, row, "not a number: '" + s + "'");
  return v;
}

inline std::uint8_t parse_bit(const std::string& s, const std::string& file, std::size_t row) {
  if (s == "0") return 0;
  if (s == "1") return 1;
  throw IngestError(file, row, "expected 0 or 1, got '" + s + "'");
}

}  // namespace csv

// Manifest columns: image_path, patient_id, dataset_id, one column per
// qualified class ("A:Atelectasis", ...), loc_1..loc_9, mask_path. Label cells
// of classes outside the row's dataset and inactive spatial cells are empty.
inline std::vector<std::string> manifest_header(const Taxonomy& tax) {
  std::vector<std::string> h{"image_path", "patient_id", "dataset_id"};
  for (auto& q : tax.qualified_names()) h.push_back(q);
  for (std::size_t m = 1; m <= kSpatialClasses; ++m) h.push_back("loc_" + std::to_string(m));
  h.push_back("mask_path");
  return h;
}

inline std::vector<std::string> manifest_row(const LabeledSample& s, const Taxonomy& tax) {
  std::vector<std::string> r{s.image_path, s.patient_id, s.dataset_id};
  for (std::size_t n = 0; n < tax.num_classes(); ++n)
    r.push_back(s.labels.dataset_mask[n] ? std::to_string(int(s.labels.abnormal[n])) : "");
  for (std::size_t m = 0; m < kSpatialClasses; ++m)
    r.push_back(s.labels.spatial_active ? std::to_string(int(s.labels.spatial[m])) : "");
  r.push_back(s.labels.seg_active ? s.mask_path : "");
  return r;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<LabeledSample>& samples,
                           const Taxonomy& tax) {
  std::vector<std::vector<std::string>> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) rows.push_back(manifest_row(s, tax));
  csv::write(path, manifest_header(tax), rows);
}

// Mask PNGs store bit 0 = lungs, bit 1 = heart.
inline Image encode_mask(const std::vector<std::uint8_t>& seg, std::size_t n) {
  Image img(n, n, 0.0, 0.0, 255.0);
  for (std::size_t i = 0; i < n * n; ++i) img.pixels[i] = double(seg[i] | (seg[n * n + i] << 1));
  return img;
}

inline std::vector<std::uint8_t> decode_mask(const Image& img) {
  if (img.width != img.height) throw ShapeError("mask must be square");
  const std::size_t n = img.width;
  std::vector<std::uint8_t> seg(2 * n * n, 0);
  for (std::size_t i = 0; i < n * n; ++i) {
    const auto v = unsigned(std::lround(img.pixels[i]));
    seg[i] = v & 1u;
    seg[n * n + i] = (v >> 1) & 1u;
  }
  return seg;
}

struct ManifestOptions {
  bool load_images = true;
};

inline std::vector<LabeledSample> load_manifest(const std::filesystem::path& path, const Taxonomy& tax = default_taxonomy(),
                                                const ManifestOptions& opt = {}) {
  const std::string file = path.string();
  const auto table = csv::read(path);
  if (table.header != manifest_header(tax)) throw IngestError(file, 1, "header does not match the class taxonomy");
  const auto base = path.parent_path();
  const std::size_t d = tax.num_classes();
  const std::size_t loc0 = 3 + d;
  const std::size_t mask_col = loc0 + kSpatialClasses;

  std::vector<LabeledSample> out;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& r = table.rows[i];
    const std::size_t line = table.line_numbers[i];
    LabeledSample s;
    s.image_path = r[0];
    s.patient_id = r[1];
    s.dataset_id = r[2];
    if (s.image_path.empty()) throw IngestError(file, line, "empty image_path");
    if (s.patient_id.empty()) throw IngestError(file, line, "empty patient_id");
    s.image_id = std::filesystem::path(s.image_path).stem().string();
    const auto ds = tax.find(s.dataset_id);
    if (!ds) throw IngestError(file, line, "unknown dataset_id '" + s.dataset_id + "'");

    auto& L = s.labels;
    L.dataset_mask = tax.mask_for(*ds);
    L.abnormal.assign(d, 0);
    for (std::size_t n = 0; n < d; ++n) {
      const auto& cell = r[3 + n];
      if (L.dataset_mask[n]) {
        L.abnormal[n] = csv::parse_bit(cell, file, line);
      } else if (!cell.empty()) {
        throw IngestError(file, line, "label for " + table.header[3 + n] + " given on a dataset " + s.dataset_id + " row");
      }
    }

    std::size_t filled = 0;
    for (std::size_t m = 0; m < kSpatialClasses; ++m) filled += r[loc0 + m].empty() ? 0 : 1;
    if (filled != 0 && filled != kSpatialClasses) throw IngestError(file, line, "spatial columns partially filled");
    L.spatial.assign(kSpatialClasses, 0);
    if (filled) {
      if (!tax.datasets[*ds].has_spatial)
        throw IngestError(file, line, "spatial labels on dataset " + s.dataset_id + ", which has none");
      for (std::size_t m = 0; m < kSpatialClasses; ++m) L.spatial[m] = csv::parse_bit(r[loc0 + m], file, line);
      L.spatial_active = true;
    }

    s.mask_path = r[mask_col];
    if (opt.load_images) {
      try {
        s.image = read_image(base / s.image_path);
        if (!s.mask_path.empty()) {
          L.seg = decode_mask(read_image(base / s.mask_path));
          if (L.seg.size() != 2 * s.image.width * s.image.height || s.image.width != s.image.height)
            throw IngestError(file, line, "mask size does not match the image");
        }
      } catch (const ImageIoError& e) {
        throw IngestError(file, line, e.what());
      } catch (const ShapeError& e) {
        throw IngestError(file, line, e.what());
      }
    }
    L.seg_active = !s.mask_path.empty();
    out.push_back(std::move(s));
  }
  return out;
}

// Annotation CSV: case_id, abnormality, reader, label. Case, abnormality and
// reader order follow first appearance; every combination must be present.
inline std::vector<std::vector<std::string>> annotation_rows(const ReaderMatrix& m) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t c = 0; c < m.cases(); ++c)
    for (std::size_t a = 0; a < m.abnormalities(); ++a)
      for (std::size_t r = 0; r < m.readers(); ++r)
        rows.push_back({m.case_ids()[c], m.abnormality_names()[a], m.reader_names()[r], std::to_string(int(m.at(c, a, r)))});
  return rows;
}

inline void write_annotations(const std::filesystem::path& path, const ReaderMatrix& m) {
  csv::write(path, {"case_id", "abnormality", "reader", "label"}, annotation_rows(m));
}

inline ReaderMatrix load_annotations(const std::filesystem::path& path, const std::string& original) {
  const std::string file = path.string();
  const auto t = csv::read(path);
  const std::size_t ci = t.column("case_id", file), ai = t.column("abnormality", file), ri = t.column("reader", file),
                    li = t.column("label", file);
  std::vector<std::string> cases, abns, readers;
  std::map<std::string, std::size_t> cmap, amap, rmap;
  auto intern = [](std::map<std::string, std::size_t>& m, std::vector<std::string>& v, const std::string& k) {
    auto [it, fresh] = m.emplace(k, v.size());
    if (fresh) v.push_back(k);
    return it->second;
  };
  struct Entry {
    std::size_t c, a, r;
    std::uint8_t v;
    std::size_t line;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    entries.push_back({intern(cmap, cases, row[ci]), intern(amap, abns, row[ai]), intern(rmap, readers, row[ri]),
                       csv::parse_bit(row[li], file, t.line_numbers[i]), t.line_numbers[i]});
  }
  auto orig = rmap.find(original);
  if (orig == rmap.end()) throw IngestError(file, 0, "original reader '" + original + "' not found");
  if (readers.size() < 2) throw IngestError(file, 0, "need at least two readers");
  ReaderMatrix m(cases, abns, readers, orig->second);
  std::vector<std::uint8_t> seen(cases.size() * abns.size() * readers.size(), 0);
  for (const auto& e : entries) {
    auto& s = seen[(e.c * abns.size() + e.a) * readers.size() + e.r];
    if (s) throw IngestError(file, e.line, "duplicate annotation");
    s = 1;
    m.set(e.c, e.a, e.r, e.v);
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end())
    throw IngestError(file, 0, "annotation matrix is incomplete");
  return m;
}

// Scores CSV: case_id, abnormality, score, label.
struct ScoreRow {
  std::string case_id;
  std::string abnormality;
  double score = 0.0;
  std::uint8_t label = 0;
  bool operator==(const ScoreRow&) const = default;
};

inline void write_scores(const std::filesystem::path& path, const std::vector<ScoreRow>& rows) {
  std::vector<std::vector<std::string>> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back({r.case_id, r.abnormality, csv::format(r.score), std::to_string(int(r.label))});
  csv::write(path, {"case_id", "abnormality", "score", "label"}, out);
}

inline std::vector<ScoreRow> load_scores(const std::filesystem::path& path) {
  const std::string file = path.string();
  const auto t = csv::read(path);
  const std::size_t ci = t.column("case_id", file), ai = t.column("abnormality", file), si = t.column("score", file),
                    li = t.column("label", file);
  std::vector<ScoreRow> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    ScoreRow s{r[ci], r[ai], csv::parse_double(r[si], file, t.line_numbers[i]),
               csv::parse_bit(r[li], file, t.line_numbers[i])};
    if (!(s.score >= 0.0 && s.score <= 1.0)) throw IngestError(file, t.line_numbers[i], "score outside [0,1]");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cxrmt
