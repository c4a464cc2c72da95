#include "rarecell/report.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "rarecell/errors.hpp"
#include "rarecell/image.hpp"
#include "rarecell/io.hpp"
#include "rarecell/random.hpp"

namespace rarecell {

namespace {

GridLayout near_square(std::size_t k) {
  int rows = static_cast<int>(std::floor(std::sqrt(static_cast<double>(k))));
  while (rows > 1 && k % static_cast<std::size_t>(rows) != 0) --rows;
  rows = std::max(rows, 1);
  return {rows, static_cast<int>(k / static_cast<std::size_t>(rows))};
}

}  // namespace

GridManifest build_grid_manifest(const RankedList& list, const Dataset& dataset, std::size_t K,
                                 std::uint64_t shuffle_seed, std::optional<GridLayout> layout,
                                 std::string grid_id, std::string pool_id) {
  if (K == 0) throw ArgumentError("grid size K must be positive");
  GridManifest m;
  m.grid_id = std::move(grid_id);
  m.pool_id = std::move(pool_id);
  m.shuffle_seed = shuffle_seed;
  m.K = std::min(K, list.size());
  if (m.K == 0) throw ArgumentError("cannot build a grid from an empty ranking");

  std::vector<GridCell> cells;
  cells.reserve(m.K);
  for (std::size_t i = 0; i < m.K; ++i) {
    GridCell c;
    c.instance_id = list[i].instance_id;
    if (const auto* p = dataset.find(c.instance_id)) {
      c.image_ref = p->image_ref;
      if (p->true_label != Label::unknown) c.ground_truth = p->true_label;
    }
    cells.push_back(std::move(c));
  }
  Rng rng(derive_seed(shuffle_seed, {0x67726964}));
  rng.shuffle(cells);
  m.cells = std::move(cells);

  if (layout && m.K == K) {
    if (layout->rows <= 0 || layout->cols <= 0 ||
        static_cast<std::size_t>(layout->rows) * static_cast<std::size_t>(layout->cols) != m.K) {
      throw ArgumentError("layout " + std::to_string(layout->rows) + "x" + std::to_string(layout->cols) +
                          " does not hold K=" + std::to_string(m.K) + " cells");
    }
    m.layout = *layout;
  } else {
    m.layout = near_square(m.K);
  }
  return m;
}

AgreementStats agreement_stats(const GridManifest& manifest, const std::vector<ReviewRecord>& records) {
  std::set<std::string> cells;
  for (const auto& c : manifest.cells) cells.insert(c.instance_id);
  for (const auto& r : records) {
    if (r.grid_id != manifest.grid_id) {
      throw ArgumentError("review by '" + r.reviewer_id + "' is for grid '" + r.grid_id + "', expected '" +
                          manifest.grid_id + "'");
    }
    for (const auto& id : r.marked) {
      if (!cells.count(id)) throw ArgumentError("review marks '" + id + "', which is not in the grid");
    }
  }
  static const std::set<std::string> kEmpty;
  const auto& a = records.size() > 0 ? records[0].marked : kEmpty;
  const auto& b = records.size() > 1 ? records[1].marked : kEmpty;
  AgreementStats s;
  for (const auto& id : cells) {
    const bool in_a = a.count(id) > 0;
    const bool in_b = b.count(id) > 0;
    if (in_a && in_b) {
      ++s.both;
    } else if (in_a) {
      ++s.only_a;
    } else if (in_b) {
      ++s.only_b;
    } else {
      ++s.none;
    }
  }
  return s;
}

std::size_t render_mosaic(const GridManifest& manifest, const std::vector<ReviewRecord>& reviews,
                          const std::filesystem::path& image_root, const std::filesystem::path& output,
                          const MosaicOptions& options) {
  if (!reviews.empty()) agreement_stats(manifest, reviews);  // validates grid ids and marks
  const int tile = options.tile;
  const int gap = options.gap;
  const int rows = manifest.layout.rows;
  const int cols = manifest.layout.cols;
  cv::Mat canvas(rows * tile + (rows + 1) * gap, cols * tile + (cols + 1) * gap, CV_8UC3, cv::Scalar(0, 0, 0));

  const cv::Scalar white(255, 255, 255), black(0, 0, 0), red(0, 0, 255), blue(255, 0, 0);
  const int box = std::max(tile / 4, 8);
  const int stroke = std::max(box / 8, 1);
  std::size_t placeholders = 0;

  for (std::size_t idx = 0; idx < manifest.cells.size(); ++idx) {
    const auto& cell = manifest.cells[idx];
    const int r = static_cast<int>(idx) / cols;
    const int c = static_cast<int>(idx) % cols;
    const cv::Rect dst(gap + c * (tile + gap), gap + r * (tile + gap), tile, tile);

    cv::Mat bgr;
    try {
      std::filesystem::path ref(cell.image_ref);
      if (cell.image_ref.empty()) throw FormatError("no image_ref");
      const Image img = load_image(ref.is_absolute() ? ref : image_root / ref);
      cv::Mat u8;
      img.mat().convertTo(u8, CV_8UC3, 255.0);
      cv::cvtColor(u8, bgr, cv::COLOR_RGB2BGR);
      cv::resize(bgr, bgr, cv::Size(tile, tile), 0, 0, cv::INTER_AREA);
    } catch (const Error&) {
      bgr = cv::Mat(tile, tile, CV_8UC3, cv::Scalar(128, 128, 128));
      cv::line(bgr, {0, 0}, {tile - 1, tile - 1}, cv::Scalar(90, 90, 90), 1);
      cv::line(bgr, {tile - 1, 0}, {0, tile - 1}, cv::Scalar(90, 90, 90), 1);
      ++placeholders;
    }
    bgr.copyTo(canvas(dst));

    const cv::Rect corner(dst.x + tile - box - 2, dst.y + 2, box, box);
    const cv::Point tl(corner.x + 2, corner.y + 2);
    const cv::Point br(corner.x + box - 3, corner.y + box - 3);
    const cv::Point tr(corner.x + box - 3, corner.y + 2);
    const cv::Point bl(corner.x + 2, corner.y + box - 3);

    if (!reviews.empty()) {
      const bool a = reviews[0].marked.count(cell.instance_id) > 0;
      const bool b = reviews.size() > 1 && reviews[1].marked.count(cell.instance_id) > 0;
      if (a || b) {
        cv::rectangle(canvas, corner, white, cv::FILLED);
        if (a) cv::line(canvas, tl, br, red, stroke, cv::LINE_AA);   // backslash
        if (b) cv::line(canvas, bl, tr, blue, stroke, cv::LINE_AA);  // slash
      }
    } else if (options.show_ground_truth && cell.ground_truth && *cell.ground_truth == Label::abnormal) {
      cv::rectangle(canvas, corner, white, cv::FILLED);
      cv::line(canvas, tl, br, black, stroke, cv::LINE_AA);
      cv::line(canvas, bl, tr, black, stroke, cv::LINE_AA);
    }
  }
  if (output.has_parent_path()) std::filesystem::create_directories(output.parent_path());
  if (!cv::imwrite(output.string(), canvas)) throw Error("cannot write mosaic: " + output.string());
  return placeholders;
}

namespace {

struct Series {
  std::vector<CurvePoint> points;  // sorted by wr
};

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string fmt(double v, int precision = 2) {
  std::ostringstream ss;
  ss << std::setprecision(precision) << std::fixed << v;
  return ss.str();
}

std::string tick_label(double v) {
  std::ostringstream ss;
  ss << std::setprecision(3) << v;
  return ss.str();
}

}  // namespace

std::vector<std::filesystem::path> plot_wr_curves(const std::vector<CurvePoint>& table,
                                                  const std::filesystem::path& output_dir, std::size_t K) {
  if (table.empty()) throw ArgumentError("no aggregated metrics to plot");
  std::map<std::string, std::map<std::string, Series>> by_metric;
  for (const auto& p : table) {
    if (!(p.wr_percent > 0.0)) throw ArgumentError("witness rates must be positive on a log axis");
    by_metric[p.metric][p.method].points.push_back(p);
  }
  for (auto& [metric, methods] : by_metric) {
    for (auto& [method, series] : methods) {
      std::sort(series.points.begin(), series.points.end(),
                [](const CurvePoint& a, const CurvePoint& b) { return a.wr_percent < b.wr_percent; });
      if (series.points.size() < 2) {
        throw ArgumentError("method '" + method + "' has fewer than 2 witness-rate points for " + metric);
      }
    }
  }

  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
  const double W = 720, H = 460, left = 80, right = 170, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  std::vector<std::filesystem::path> written;

  for (const auto& [metric, methods] : by_metric) {
    double xmin = std::numeric_limits<double>::infinity(), xmax = 0.0;
    double ymin = std::numeric_limits<double>::infinity(), ymax = 0.0;
    for (const auto& [method, s] : methods) {
      for (const auto& p : s.points) {
        xmin = std::min(xmin, p.wr_percent);
        xmax = std::max(xmax, p.wr_percent);
        if (p.mean > 0.0) ymin = std::min(ymin, std::max(p.mean - p.std, p.mean / 10.0));
        ymax = std::max(ymax, p.mean + p.std);
      }
    }
    if (!std::isfinite(ymin) || ymax <= 0.0) {
      ymin = 1e-3;
      ymax = 1.0;
    }
    ymin = std::pow(10.0, std::floor(std::log10(ymin)));
    ymax = std::pow(10.0, std::ceil(std::log10(ymax)));
    if (ymax <= ymin) ymax = ymin * 10.0;
    const double lx0 = std::log10(xmin) - 0.1, lx1 = std::log10(xmax) + 0.1;
    const double ly0 = std::log10(ymin), ly1 = std::log10(ymax);
    auto X = [&](double wr) { return left + (std::log10(wr) - lx0) / (lx1 - lx0) * pw; };
    auto Y = [&](double v) {
      const double lv = std::log10(std::max(v, ymin));
      return top + (1.0 - (lv - ly0) / (ly1 - ly0)) * ph;
    };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
        << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (double d = ly0; d <= ly1 + 1e-9; d += 1.0) {
      const double v = std::pow(10.0, d);
      svg << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << fmt(Y(v)) << "\" y2=\"" << fmt(Y(v))
          << "\" stroke=\"#ddd\"/>\n";
      svg << "<text x=\"" << left - 6 << "\" y=\"" << fmt(Y(v) + 4) << "\" font-size=\"11\" text-anchor=\"end\">"
          << tick_label(v) << "</text>\n";
    }
    std::set<double> wrs;
    for (const auto& [method, s] : methods)
      for (const auto& p : s.points) wrs.insert(p.wr_percent);
    for (double wr : wrs) {
      svg << "<line x1=\"" << fmt(X(wr)) << "\" x2=\"" << fmt(X(wr)) << "\" y1=\"" << top << "\" y2=\"" << top + ph
          << "\" stroke=\"#eee\"/>\n";
      svg << "<text x=\"" << fmt(X(wr)) << "\" y=\"" << top + ph + 16 << "\" font-size=\"11\" text-anchor=\"middle\">"
          << tick_label(wr) << "</text>\n";
    }
    const std::string label = metric + "@" + std::to_string(K);
    svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15
        << "\" font-size=\"13\" text-anchor=\"middle\">witness rate (%)</text>\n";
    svg << "<text x=\"18\" y=\"" << top + ph / 2 << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
        << top + ph / 2 << ")\">" << svg_escape(label) << "</text>\n";
    svg << "<text x=\"" << left + pw / 2 << "\" y=\"24\" font-size=\"14\" text-anchor=\"middle\">Mean "
        << svg_escape(label) << " across witness rates (log-log)</text>\n";

    int color = 0;
    double legend_y = top + 10;
    for (const auto& [method, s] : methods) {
      const char* col = kColors[color++ % 7];
      std::ostringstream band;
      for (const auto& p : s.points) band << fmt(X(p.wr_percent)) << "," << fmt(Y(p.mean + p.std)) << " ";
      for (auto it = s.points.rbegin(); it != s.points.rend(); ++it) {
        band << fmt(X(it->wr_percent)) << "," << fmt(Y(it->mean - it->std)) << " ";
      }
      svg << "<polygon points=\"" << band.str() << "\" fill=\"" << col << "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n";
      std::ostringstream line;
      for (const auto& p : s.points) line << fmt(X(p.wr_percent)) << "," << fmt(Y(p.mean)) << " ";
      svg << "<polyline points=\"" << line.str() << "\" fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
      for (const auto& p : s.points) {
        svg << "<circle cx=\"" << fmt(X(p.wr_percent)) << "\" cy=\"" << fmt(Y(p.mean)) << "\" r=\"3\" fill=\"" << col
            << "\"/>\n";
      }
      svg << "<line x1=\"" << left + pw + 15 << "\" x2=\"" << left + pw + 40 << "\" y1=\"" << legend_y << "\" y2=\""
          << legend_y << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
      svg << "<text x=\"" << left + pw + 46 << "\" y=\"" << legend_y + 4 << "\" font-size=\"12\">" << svg_escape(method)
          << "</text>\n";
      legend_y += 18;
    }
    svg << "</svg>\n";
    const auto path = output_dir / (metric + "_at_" + std::to_string(K) + ".svg");
    write_file_atomic(path, svg.str());
    written.push_back(path);
  }
  return written;
}

void to_json(nlohmann::json& j, const GridManifest& m) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : m.cells) {
    nlohmann::json cj{{"instance_id", c.instance_id}, {"image_ref", c.image_ref}};
    if (c.ground_truth) cj["ground_truth"] = std::string(to_string(*c.ground_truth));
    cells.push_back(std::move(cj));
  }
  j = nlohmann::json{{"grid_id", m.grid_id},
                     {"pool_id", m.pool_id},
                     {"K", m.K},
                     {"cells", std::move(cells)},
                     {"shuffle_seed", m.shuffle_seed},
                     {"layout", {{"rows", m.layout.rows}, {"cols", m.layout.cols}}},
                     {"config_hash", m.config_hash}};
}

void from_json(const nlohmann::json& j, GridManifest& m) {
  m.grid_id = j.at("grid_id").get<std::string>();
  m.pool_id = j.value("pool_id", std::string{});
  m.K = j.at("K").get<std::size_t>();
  m.shuffle_seed = j.value("shuffle_seed", std::uint64_t{0});
  m.layout.rows = j.at("layout").at("rows").get<int>();
  m.layout.cols = j.at("layout").at("cols").get<int>();
  m.config_hash = j.value("config_hash", std::string{});
  m.cells.clear();
  for (const auto& cj : j.at("cells")) {
    GridCell c;
    c.instance_id = cj.at("instance_id").get<std::string>();
    c.image_ref = cj.value("image_ref", std::string{});
    if (auto it = cj.find("ground_truth"); it != cj.end() && !it->is_null()) c.ground_truth = parse_label(it->get<std::string>());
    m.cells.push_back(std::move(c));
  }
  if (m.cells.size() != m.K) throw IntegrityError("grid '" + m.grid_id + "' lists " + std::to_string(m.cells.size()) +
                                                  " cells but K=" + std::to_string(m.K));
}

void to_json(nlohmann::json& j, const ReviewRecord& r) {
  j = nlohmann::json{{"grid_id", r.grid_id},
                     {"reviewer_id", r.reviewer_id},
                     {"marked", std::vector<std::string>(r.marked.begin(), r.marked.end())},
                     {"timestamp", r.timestamp}};
}

void from_json(const nlohmann::json& j, ReviewRecord& r) {
  r.grid_id = j.at("grid_id").get<std::string>();
  r.reviewer_id = j.at("reviewer_id").get<std::string>();
  const auto marked = j.at("marked").get<std::vector<std::string>>();
  r.marked = std::set<std::string>(marked.begin(), marked.end());
  r.timestamp = j.value("timestamp", std::string{});
}

void to_json(nlohmann::json& j, const AgreementStats& s) {
  j = nlohmann::json{{"both", s.both}, {"only_a", s.only_a}, {"only_b", s.only_b}, {"none", s.none}};
}

}  // namespace rarecell
