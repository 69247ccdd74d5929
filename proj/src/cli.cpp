#include "ctflow/cli.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <fstream>
#include <map>
#include <sstream>

namespace ctf::cli {

namespace {

std::string timestamp_now() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

class RunScope {
 public:
  RunScope(std::filesystem::path dir, std::string command, nlohmann::json args,
           std::uint64_t seed)
      : dir_(std::move(dir)),
        command_(std::move(command)),
        args_(std::move(args)),
        seed_(seed),
        started_(std::chrono::steady_clock::now()),
        started_at_(timestamp_now()) {
    std::filesystem::create_directories(dir_);
  }

  void finish(const std::string& status) {
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    nlohmann::json manifest{
        {"command", command_}, {"args", args_},     {"seed", seed_},
        {"version", kVersion}, {"status", status},  {"started_at", started_at_},
        {"wall_clock_s", wall},
    };
    std::ofstream out(dir_ / "run_manifest.json");
    if (out) out << manifest.dump(2) << "\n";
  }

 private:
  std::filesystem::path dir_;
  std::string command_;
  nlohmann::json args_;
  std::uint64_t seed_;
  std::chrono::steady_clock::time_point started_;
  std::string started_at_;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int cmd_gen_shapes(const GenShapesOpts& opts) {
  RunScope run(opts.out, "gen-shapes",
               {{"count", opts.count}, {"kinds", opts.kinds}, {"points", opts.points}},
               opts.seed);
  std::vector<std::string> kinds = split_list(opts.kinds);
  if (kinds.empty()) throw InvalidArgument("gen-shapes: empty kind list");
  for (std::size_t i = 0; i < opts.count; ++i) {
    ShapeKind kind = shape_kind_from_string(kinds[i % kinds.size()]);
    Rng rng(mix_seed(opts.seed, i));
    PointCloud shape = make_shape(kind, opts.points, rng);
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%04zu.xyz", to_string(kind).c_str(), i);
    write_xyz(opts.out / name, shape);
  }
  run.finish("ok");
  log_info("gen-shapes: wrote " + std::to_string(opts.count) + " shapes to " + opts.out.string());
  return 0;
}

int cmd_gen_data(const GenDataOpts& opts) {
  nlohmann::json args{{"shapes", opts.shapes_dir.string()},
                      {"category", opts.category},
                      {"count", opts.count},
                      {"train_frac", opts.train_frac},
                      {"val_frac", opts.val_frac},
                      {"max_attempts", opts.max_attempts}};
  if (opts.overlap) args["overlap"] = *opts.overlap;
  RunScope run(opts.out, "gen-data", args, opts.seed);

  BuildOptions build;
  build.category = opts.category;
  build.count = opts.count;
  build.seed = opts.seed;
  build.overlap_eta = opts.overlap;
  build.train_frac = opts.train_frac;
  build.val_frac = opts.val_frac;
  build.config.max_attempts = opts.max_attempts;
  build.workers = opts.workers > 0 ? opts.workers : num_workers();

  std::vector<std::filesystem::path> files;
  if (!std::filesystem::is_directory(opts.shapes_dir)) {
    throw IoError("gen-data: shapes directory not found: " + opts.shapes_dir.string());
  }
  for (const auto& entry : std::filesystem::directory_iterator(opts.shapes_dir)) {
    if (entry.path().extension() == ".xyz") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("gen-data: no .xyz shapes in " + opts.shapes_dir.string());
  for (const auto& f : files) {
    build.shapes.emplace_back(f.stem().string(), read_xyz(f));
  }

  BuildResult result = build_dataset(opts.out, build);
  if (result.manifest.samples.empty()) {
    run.finish("failed: empty output");
    throw Error("gen-data: no samples could be generated");
  }
  run.finish("ok");
  log_info("gen-data: " + std::to_string(result.manifest.samples.size()) + " samples (" +
           std::to_string(result.skipped) + " skipped) in " + opts.out.string());
  return 0;
}

int cmd_train(const TrainOpts& opts) {
  TrainConfig config = TrainConfig::load(opts.config_file);
  RunScope run(opts.out, "train",
               {{"data", opts.data.string()},
                {"config", config.to_json()},
                {"resume", opts.resume.string()}},
               config.seed);
  // Snapshot the effective config next to the run outputs.
  {
    std::ofstream out(opts.out / "config.json");
    out << config.to_json().dump(2) << "\n";
  }
  try {
    TrainResult result = train(opts.data, config, opts.out, opts.resume);
    run.finish("ok");
    log_info("train: finished at iteration " + std::to_string(result.end_iteration));
  } catch (...) {
    run.finish("failed");
    throw;
  }
  return 0;
}

EvalRun run_eval(const std::filesystem::path& data_dir, const ParamSet& params,
                 const ModelConfig& model, const std::string& split,
                 const EvalFlowChoice& choice, const StressSpec* stress, std::uint64_t seed) {
  DatasetManifest manifest = read_manifest(data_dir);
  EvalRun out;
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    if (split == "all" || manifest.samples[i].split == split) picked.push_back(i);
  }
  if (picked.empty()) throw InvalidArgument("run_eval: no samples in split '" + split + "'");

  out.samples.resize(picked.size());
  for (std::size_t k = 0; k < picked.size(); ++k) {
    const DatasetEntry& entry = manifest.samples[picked[k]];
    ScanPair pair = read_sample(data_dir, entry.id);
    Rng stress_rng(mix_seed(seed, picked[k]));
    out.samples[k] = {entry, evaluate_sample(params, model, pair, choice, stress,
                                             stress ? &stress_rng : nullptr)};
  }

  std::map<std::string, std::pair<EvalRecord, std::size_t>> by_category;
  EvalRecord total;
  for (const auto& [entry, record] : out.samples) {
    auto& slot = by_category[entry.category];
    slot.first += record;
    ++slot.second;
    total += record;
  }
  for (const auto& [category, slot] : by_category) {
    out.categories.push_back(
        {category, slot.first.scaled(1.0 / static_cast<double>(slot.second)), slot.second});
  }
  out.average = total.scaled(1.0 / static_cast<double>(out.samples.size()));
  return out;
}

namespace {

void write_sample_csv(const std::filesystem::path& path, const EvalRun& run) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string());
  out.precision(17);
  out << "id,category,e_theta,e_t,e_emd_g,e_emd_f,e_cd_g,e_cd_f\n";
  for (const auto& [entry, r] : run.samples) {
    out << entry.id << ',' << entry.category << ',' << r.e_theta << ',' << r.e_t << ','
        << r.e_emd_g << ',' << r.e_emd_f << ',' << r.e_cd_g << ',' << r.e_cd_f << '\n';
  }
}

}  // namespace

int cmd_eval(const EvalOpts& opts) {
  RunScope run(opts.out, "eval",
               {{"data", opts.data.string()},
                {"checkpoint", opts.checkpoint.string()},
                {"flow", opts.flow},
                {"split", opts.split},
                {"oracle_registration", opts.oracle_registration}},
               0);
  Checkpoint ck = load_checkpoint(opts.checkpoint);
  EvalFlowChoice choice{opts.flow, opts.flow, opts.oracle_registration};
  EvalRun result = run_eval(opts.data, ck.params, ck.config, opts.split, choice, nullptr, 0);
  write_eval_csv(opts.out / "eval.csv", result.categories);
  write_sample_csv(opts.out / "samples.csv", result);
  run.finish("ok");
  log_info("eval: " + std::to_string(result.samples.size()) + " samples, e_theta " +
           std::to_string(result.average.e_theta) + ", e_t " + std::to_string(result.average.e_t));
  return 0;
}

int cmd_stress(const StressOpts& opts) {
  RunScope run(opts.out, "stress",
               {{"data", opts.data.string()},
                {"checkpoint", opts.checkpoint.string()},
                {"noise", opts.noise},
                {"outliers", opts.outliers},
                {"filter", opts.filter},
                {"flow", opts.flow},
                {"split", opts.split}},
               opts.seed);
  if (opts.noise.empty() && opts.outliers.empty()) {
    throw InvalidArgument("stress: give at least one --noise or --outliers setting");
  }
  Checkpoint ck = load_checkpoint(opts.checkpoint);
  EvalFlowChoice choice{opts.flow, opts.flow, false};

  std::ofstream out(opts.out / "stress.csv");
  if (!out) throw IoError("stress: cannot open stress.csv");
  out.precision(17);
  out << "label,noise,outliers,filtered,e_theta,e_t,e_emd_g,e_emd_f,e_cd_g,e_cd_f,n_samples\n";
  auto emit = [&](const std::string& label, const StressSpec& spec) {
    EvalRun result =
        run_eval(opts.data, ck.params, ck.config, opts.split, choice, &spec, opts.seed);
    const EvalRecord& r = result.average;
    out << label << ',' << spec.noise_level << ',' << spec.outlier_count << ','
        << (spec.filter_enabled ? 1 : 0) << ',' << r.e_theta << ',' << r.e_t << ',' << r.e_emd_g
        << ',' << r.e_emd_f << ',' << r.e_cd_g << ',' << r.e_cd_f << ','
        << result.samples.size() << '\n';
  };

  for (double zeta : opts.noise) {
    StressSpec spec;
    spec.noise_level = zeta;
    emit("noise_" + std::to_string(zeta), spec);
  }
  for (int k : opts.outliers) {
    if (k < 0) throw InvalidArgument("stress: outlier count must be >= 0");
    StressSpec spec;
    spec.outlier_count = static_cast<std::size_t>(k);
    spec.filter_enabled = opts.filter;
    spec.filter_radius = opts.filter_radius;
    spec.filter_min_neighbors = static_cast<std::size_t>(opts.filter_min_neighbors);
    emit("outliers_" + std::to_string(k) + (opts.filter ? "_filtered" : ""), spec);
  }
  run.finish("ok");
  return 0;
}

// --- plot -------------------------------------------------------------------

namespace {

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw SchemaError("plot: column '" + name + "' not found (have: " + join() + ")");
  }

  std::string join() const {
    std::string s;
    for (std::size_t i = 0; i < header.size(); ++i) s += (i ? "," : "") + header[i];
    return s;
  }
};

Csv read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("plot: cannot open " + path.string());
  Csv csv;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (first) {
      csv.header = cells;
      first = false;
    } else {
      csv.rows.push_back(cells);
    }
  }
  return csv;
}

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

void write_svg(const std::filesystem::path& path, const std::vector<Series>& series,
               const std::string& x_label, const std::string& y_label) {
  const double width = 640, height = 420, ml = 70, mr = 20, mt = 20, mb = 50;
  double x_min = 1e300, x_max = -1e300, y_min = 1e300, y_max = -1e300;
  for (const Series& s : series) {
    for (auto [x, y] : s.points) {
      x_min = std::min(x_min, x);
      x_max = std::max(x_max, x);
      y_min = std::min(y_min, y);
      y_max = std::max(y_max, y);
    }
  }
  if (x_min > x_max) throw InvalidArgument("plot: nothing to draw");
  if (x_max == x_min) x_max = x_min + 1.0;
  if (y_max == y_min) y_max = y_min + 1.0;
  y_min = std::min(y_min, 0.0);
  auto sx = [&](double x) { return ml + (x - x_min) / (x_max - x_min) * (width - ml - mr); };
  auto sy = [&](double y) { return height - mb - (y - y_min) / (y_max - y_min) * (height - mt - mb); };

  const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ofstream out(path);
  if (!out) throw IoError("plot: cannot open " + path.string());
  out.precision(10);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr << "\" y2=\""
      << height - mb << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << height - mb
      << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    double fx = x_min + (x_max - x_min) * tick / 4.0;
    double fy = y_min + (y_max - y_min) * tick / 4.0;
    out << "<text x=\"" << sx(fx) << "\" y=\"" << height - mb + 18
        << "\" font-size=\"11\" text-anchor=\"middle\">" << fx << "</text>\n";
    out << "<text x=\"" << ml - 8 << "\" y=\"" << sy(fy) + 4
        << "\" font-size=\"11\" text-anchor=\"end\">" << fy << "</text>\n";
  }
  out << "<text x=\"" << (ml + width - mr) / 2 << "\" y=\"" << height - 10
      << "\" font-size=\"13\" text-anchor=\"middle\">" << x_label << "</text>\n";
  out << "<text x=\"16\" y=\"" << (mt + height - mb) / 2
      << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (mt + height - mb) / 2 << ")\">" << y_label << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = colors[i % 6];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (auto [x, y] : series[i].points) out << sx(x) << "," << sy(y) << " ";
    out << "\"/>\n";
    for (auto [x, y] : series[i].points) {
      out << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y) << "\" r=\"3\" fill=\"" << color
          << "\"/>\n";
    }
    out << "<text x=\"" << width - mr - 8 << "\" y=\"" << mt + 16 + 16 * static_cast<double>(i)
        << "\" font-size=\"12\" text-anchor=\"end\" fill=\"" << color << "\">" << series[i].label
        << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace

int cmd_plot(const PlotOpts& opts) {
  if (opts.runs.empty()) throw InvalidArgument("plot: no input runs");
  std::filesystem::path out_dir = opts.out.parent_path();
  if (out_dir.empty()) out_dir = ".";
  RunScope run(out_dir, "plot", {{"metric", opts.metric}, {"inputs", opts.runs.size()}}, 0);

  std::vector<Series> series;
  std::ofstream merged(out_dir / "merged.csv");
  if (!merged) throw IoError("plot: cannot open merged.csv");
  bool wrote_header = false;
  for (const std::filesystem::path& input : opts.runs) {
    std::filesystem::path csv_path = input;
    if (std::filesystem::is_directory(input)) {
      csv_path = std::filesystem::exists(input / "stress.csv") ? input / "stress.csv"
                                                               : input / "eval.csv";
    }
    Csv csv = read_csv(csv_path);
    std::size_t metric_col = csv.column(opts.metric);
    // x axis: the noise column when it varies, otherwise outliers, otherwise
    // the row index.
    std::optional<std::size_t> noise_col, outlier_col;
    for (std::size_t i = 0; i < csv.header.size(); ++i) {
      if (csv.header[i] == "noise") noise_col = i;
      if (csv.header[i] == "outliers") outlier_col = i;
    }
    Series s;
    s.label = csv_path.parent_path().filename().string();
    if (s.label.empty()) s.label = csv_path.stem().string();
    for (std::size_t r = 0; r < csv.rows.size(); ++r) {
      const auto& row = csv.rows[r];
      if (row.size() != csv.header.size()) {
        throw SchemaError("plot: ragged row in " + csv_path.string());
      }
      if (row[0] == "average") continue;
      double x = static_cast<double>(r);
      if (noise_col && row[*noise_col] != "0" && !csv.rows.empty()) x = std::stod(row[*noise_col]);
      else if (outlier_col) x = std::stod(row[*outlier_col]);
      s.points.emplace_back(x, std::stod(row[metric_col]));
    }
    if (!wrote_header) {
      merged << "run," << csv.join() << "\n";
      wrote_header = true;
    }
    for (const auto& row : csv.rows) {
      merged << s.label;
      for (const auto& cell : row) merged << ',' << cell;
      merged << '\n';
    }
    series.push_back(std::move(s));
  }
  write_svg(opts.out, series, "setting", opts.metric);
  run.finish("ok");
  return 0;
}

}  // namespace ctf::cli
