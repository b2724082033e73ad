#include "qjump/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

namespace qjump {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    if (trim(s).empty()) {
        return out;
    }
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + 1;
    }
    return out;
}

struct Entry {
    std::string value;
    int line;
};

using Section = std::map<std::string, Entry>;

[[noreturn]] void bad_value(const std::string& key, const Entry& e, const char* expected) {
    throw ConfigError(fmt::format("line {}: {} = '{}' is not {}", e.line, key, e.value, expected));
}

double to_double(const std::string& key, const Entry& e, std::string_view text) {
    double v = 0.0;
    const auto* end = text.data() + text.size();
    const auto r = std::from_chars(text.data(), end, v);
    if (text.empty() || r.ec != std::errc() || r.ptr != end || !std::isfinite(v)) {
        bad_value(key, e, "a finite number");
    }
    return v;
}

long long to_int(const std::string& key, const Entry& e, std::string_view text) {
    long long v = 0;
    const auto* end = text.data() + text.size();
    const auto r = std::from_chars(text.data(), end, v);
    if (text.empty() || r.ec != std::errc() || r.ptr != end) {
        bad_value(key, e, "an integer");
    }
    return v;
}

// Reads the keys of one section, rejecting any key it does not know.
class SectionReader {
public:
    SectionReader(std::string name, Section entries) : name_(std::move(name)), entries_(std::move(entries)) {}

    ~SectionReader() noexcept(false) {
        if (std::uncaught_exceptions() > 0) {
            return;
        }
        for (const auto& [key, e] : entries_) {
            if (!used_.count(key)) {
                throw ConfigError(fmt::format("line {}: unknown key '{}' in [{}]", e.line, key, name_));
            }
        }
    }

    const Entry* find(const std::string& key) {
        used_.insert(key);
        const auto it = entries_.find(key);
        return it == entries_.end() ? nullptr : &it->second;
    }

    void read(const std::string& key, double& out) {
        if (const Entry* e = find(key)) {
            out = to_double(key, *e, trim(e->value));
        }
    }
    template <typename Int>
        requires std::is_integral_v<Int>
    void read(const std::string& key, Int& out) {
        if (const Entry* e = find(key)) {
            const long long v = to_int(key, *e, trim(e->value));
            if (v < static_cast<long long>(std::numeric_limits<Int>::min()) ||
                static_cast<unsigned long long>(v) > static_cast<unsigned long long>(std::numeric_limits<Int>::max())) {
                bad_value(key, *e, "in range");
            }
            out = static_cast<Int>(v);
        }
    }
    void read(const std::string& key, std::uint64_t& out) {
        if (const Entry* e = find(key)) {
            const auto text = trim(e->value);
            const auto* end = text.data() + text.size();
            const auto r = std::from_chars(text.data(), end, out);
            if (text.empty() || r.ec != std::errc() || r.ptr != end) {
                bad_value(key, *e, "an unsigned 64-bit integer");
            }
        }
    }
    void read(const std::string& key, bool& out) {
        if (const Entry* e = find(key)) {
            if (e->value == "true") {
                out = true;
            } else if (e->value == "false") {
                out = false;
            } else {
                bad_value(key, *e, "true or false");
            }
        }
    }
    void read(const std::string& key, std::string& out) {
        if (const Entry* e = find(key)) {
            out = e->value;
        }
    }
    void read(const std::string& key, std::vector<double>& out) {
        if (const Entry* e = find(key)) {
            out.clear();
            for (auto part : split(e->value, ',')) {
                out.push_back(to_double(key, *e, part));
            }
        }
    }
    void read(const std::string& key, std::vector<Index>& out) {
        if (const Entry* e = find(key)) {
            out.clear();
            for (auto part : split(e->value, ',')) {
                out.push_back(static_cast<Index>(to_int(key, *e, part)));
            }
        }
    }
    void read(const std::string& key, std::vector<SlitInterval>& out) {
        if (const Entry* e = find(key)) {
            out.clear();
            for (auto part : split(e->value, ',')) {
                const auto bounds = split(part, ':');
                if (bounds.size() != 2) {
                    bad_value(key, *e, "a list of lo:hi row ranges");
                }
                out.push_back(SlitInterval{static_cast<Index>(to_int(key, *e, bounds[0])),
                                           static_cast<Index>(to_int(key, *e, bounds[1]))});
            }
        }
    }

private:
    std::string name_;
    Section entries_;
    std::set<std::string> used_;
};

std::string join(const std::vector<double>& v) {
    std::string out;
    for (std::size_t k = 0; k < v.size(); ++k) {
        out += fmt::format("{}{:.17g}", k ? ", " : "", v[k]);
    }
    return out;
}

std::string join(const std::vector<Index>& v) {
    std::string out;
    for (std::size_t k = 0; k < v.size(); ++k) {
        out += fmt::format("{}{}", k ? ", " : "", v[k]);
    }
    return out;
}

const char* kernel_name(KernelShape k) { return k == KernelShape::kExponential ? "exponential" : "gaussian"; }

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw ConfigError(fmt::format("cannot write {}", path.string()));
    }
    os << text;
}

}  // namespace

RunConfig RunConfig::parse(std::string_view text) {
    static const std::set<std::string> known{"model", "dynamics", "ensemble", "output"};
    std::map<std::string, Section> sections;
    std::string current;
    int line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError(fmt::format("line {}: malformed section header", line_no));
            }
            current = std::string(trim(line.substr(1, line.size() - 2)));
            if (!known.count(current)) {
                throw ConfigError(fmt::format("line {}: unknown section [{}]", line_no, current));
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(fmt::format("line {}: expected key = value", line_no));
        }
        if (current.empty()) {
            throw ConfigError(fmt::format("line {}: key outside of any section", line_no));
        }
        const std::string key(trim(line.substr(0, eq)));
        auto& sec = sections[current];
        if (sec.count(key)) {
            throw ConfigError(fmt::format("line {}: duplicate key '{}'", line_no, key));
        }
        sec.emplace(key, Entry{std::string(trim(line.substr(eq + 1))), line_no});
    }

    RunConfig cfg;
    {
        SectionReader r("model", sections["model"]);
        auto& m = cfg.model;
        auto& g = m.geometry;
        r.read("kind", m.kind);
        r.read("alpha", m.alpha);
        r.read("dims", g.dims);
        r.read("grid", g.shape);
        r.read("spacing", g.spacing);
        r.read("barrier", g.barrier);
        r.read("wall_column", g.wall_column);
        r.read("slits", g.slits);
        r.read("pixels", m.pixels);
        r.read("pixel_range", m.pixel_range);
        r.read("pixel_amplitude", m.pixel_amplitude);
        std::string kernel = kernel_name(m.kernel);
        r.read("kernel", kernel);
        if (kernel == "exponential") {
            m.kernel = KernelShape::kExponential;
        } else if (kernel == "gaussian") {
            m.kernel = KernelShape::kGaussian;
        } else {
            throw ConfigError(fmt::format("kernel must be exponential or gaussian (got '{}')", kernel));
        }
        r.read("packet_center", m.packet_center);
        r.read("packet_width", m.packet_width);
        r.read("packet_momentum", m.packet_momentum);
    }
    {
        SectionReader r("dynamics", sections["dynamics"]);
        auto& d = cfg.dynamics;
        r.read("master_dt", d.master_dt);
        r.read("master_horizon", d.master_horizon);
        r.read("master_record_every", d.master_record_every);
        r.read("sampler", d.sampler);
        r.read("dt", d.dt);
        r.read("bisection_tol", d.bisection_tol);
        r.read("horizon", d.horizon);
        r.read("escape_dt", d.escape_dt);
        r.read("escape_tmax", d.escape_tmax);
        r.read("escape_record_every", d.escape_record_every);
    }
    {
        SectionReader r("ensemble", sections["ensemble"]);
        auto& e = cfg.ensemble;
        r.read("trajectories", e.trajectories);
        r.read("seed", e.seed);
        r.read("workers", e.workers);
        r.read("snapshot_times", e.snapshot_times);
    }
    {
        SectionReader r("output", sections["output"]);
        auto& o = cfg.output;
        r.read("directory", o.directory);
        r.read("records", o.records);
        r.read("dump_operators", o.dump_operators);
        std::string formats = "csv";
        r.read("formats", formats);
        if (formats != "csv") {
            throw ConfigError(fmt::format("only the csv output format is supported (got '{}')", formats));
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw ConfigError(fmt::format("cannot read config file {}", path.string()));
    }
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

std::string RunConfig::emit() const {
    const auto& m = model;
    const auto& g = m.geometry;
    std::string slits;
    for (std::size_t k = 0; k < g.slits.size(); ++k) {
        slits += fmt::format("{}{}:{}", k ? ", " : "", g.slits[k].lo, g.slits[k].hi);
    }
    std::string out;
    out += "[model]\n";
    out += fmt::format("kind = {}\n", m.kind);
    out += fmt::format("alpha = {:.17g}\n", m.alpha);
    out += fmt::format("dims = {}\n", g.dims);
    out += fmt::format("grid = {}\n", join(g.shape));
    out += fmt::format("spacing = {:.17g}\n", g.spacing);
    out += fmt::format("barrier = {}\n", g.barrier);
    out += fmt::format("wall_column = {}\n", g.wall_column);
    out += fmt::format("slits = {}\n", slits);
    out += fmt::format("pixels = {}\n", m.pixels);
    out += fmt::format("pixel_range = {:.17g}\n", m.pixel_range);
    out += fmt::format("pixel_amplitude = {:.17g}\n", m.pixel_amplitude);
    out += fmt::format("kernel = {}\n", kernel_name(m.kernel));
    out += fmt::format("packet_center = {}\n", join(m.packet_center));
    out += fmt::format("packet_width = {:.17g}\n", m.packet_width);
    out += fmt::format("packet_momentum = {}\n", join(m.packet_momentum));
    const auto& d = dynamics;
    out += "\n[dynamics]\n";
    out += fmt::format("master_dt = {:.17g}\n", d.master_dt);
    out += fmt::format("master_horizon = {:.17g}\n", d.master_horizon);
    out += fmt::format("master_record_every = {}\n", d.master_record_every);
    out += fmt::format("sampler = {}\n", d.sampler);
    out += fmt::format("dt = {:.17g}\n", d.dt);
    out += fmt::format("bisection_tol = {:.17g}\n", d.bisection_tol);
    out += fmt::format("horizon = {:.17g}\n", d.horizon);
    out += fmt::format("escape_dt = {:.17g}\n", d.escape_dt);
    out += fmt::format("escape_tmax = {:.17g}\n", d.escape_tmax);
    out += fmt::format("escape_record_every = {}\n", d.escape_record_every);
    const auto& e = ensemble;
    out += "\n[ensemble]\n";
    out += fmt::format("trajectories = {}\n", e.trajectories);
    out += fmt::format("seed = {}\n", e.seed);
    out += fmt::format("workers = {}\n", e.workers);
    out += fmt::format("snapshot_times = {}\n", join(e.snapshot_times));
    out += "\n[output]\n";
    out += fmt::format("directory = {}\n", output.directory);
    out += fmt::format("records = {}\n", output.records);
    out += fmt::format("dump_operators = {}\n", output.dump_operators);
    out += "formats = csv\n";
    return out;
}

void RunConfig::validate() const {
    const auto& m = model;
    if (m.kind != "double_slit" && m.kind != "two_level") {
        throw ConfigError(fmt::format("model kind must be double_slit or two_level (got '{}')", m.kind));
    }
    if (!(m.alpha >= 0.0)) {
        throw ConfigError("alpha must be >= 0");
    }
    if (m.kind == "double_slit") {
        m.geometry.validate();
        if (m.pixels < 1) {
            throw ConfigError("at least one pixel is required");
        }
        PixelArray::evenly_spaced(m.geometry, m.pixels, m.pixel_range, m.pixel_amplitude, m.kernel)
            .validate(m.geometry);
        if (static_cast<int>(m.packet_center.size()) != m.geometry.dims ||
            static_cast<int>(m.packet_momentum.size()) != m.geometry.dims) {
            throw ConfigError("packet_center and packet_momentum need one entry per axis");
        }
        if (!(m.packet_width > 0.0)) {
            throw ConfigError("packet_width must be positive");
        }
    }
    const auto& d = dynamics;
    for (const auto& [name, v] : {std::pair{"master_dt", d.master_dt}, {"dt", d.dt}, {"escape_dt", d.escape_dt},
                                  {"bisection_tol", d.bisection_tol}}) {
        if (!(v > 0.0)) {
            throw ConfigError(fmt::format("{} must be positive", name));
        }
    }
    if (!(d.master_horizon > 0.0) || !(d.horizon > 0.0) || !(d.escape_tmax > 0.0)) {
        throw ConfigError("horizons must be positive");
    }
    if (d.master_record_every < 1 || d.escape_record_every < 1) {
        throw ConfigError("record intervals must be >= 1 step");
    }
    try {
        step_count(d.master_dt, d.master_horizon);
        step_count(d.escape_dt, d.escape_tmax);
        if (d.sampler == "spectral_step") {
            step_count(d.dt, d.horizon);
            for (double t : ensemble.snapshot_times) {
                step_count(d.dt, t);
            }
        }
    } catch (const StepSizeError& e) {
        throw ConfigError(e.what());
    }
    if (d.sampler != "waiting_time" && d.sampler != "spectral_step") {
        throw ConfigError(fmt::format("sampler must be waiting_time or spectral_step (got '{}')", d.sampler));
    }
    EnsembleConfig ec;
    ec.trajectories = ensemble.trajectories;
    ec.workers = ensemble.workers;
    ec.horizon = d.horizon;
    ec.snapshot_times = ensemble.snapshot_times;
    ec.validate();
    if (output.directory.empty()) {
        throw ConfigError("output directory must not be empty");
    }
}

SamplerMode RunConfig::sampler_mode() const {
    return dynamics.sampler == "spectral_step" ? SamplerMode::spectral_step(dynamics.dt)
                                               : SamplerMode::waiting_time(dynamics.dt, dynamics.bisection_tol);
}

std::uint64_t fnv1a(std::string_view data) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

BuiltModel build_model(const RunConfig& cfg) {
    cfg.validate();
    const auto& m = cfg.model;
    if (m.kind == "two_level") {
        // H = 0, T = |1><0|, start in |0>; the single detector bin is |1>
        SparseMatrix t(2, 2);
        t.insert(1, 0) = Complex(1.0, 0.0);
        LindbladGenerator gen(HermitianOperator::from_dense(Matrix::Zero(2, 2)), m.alpha, {t});
        return BuiltModel{std::nullopt, std::move(gen), PureState(Vector::Unit(2, 0)), {Projector::basis_vector(2, 1)},
                          {1.0}};
    }
    const auto pixels = PixelArray::evenly_spaced(m.geometry, m.pixels, m.pixel_range, m.pixel_amplitude, m.kernel);
    auto model = qjump::build_model(m.geometry, pixels);
    std::array<double, 3> center{0.0, 0.0, 0.0};
    std::array<double, 3> momentum{0.0, 0.0, 0.0};
    std::copy(m.packet_center.begin(), m.packet_center.end(), center.begin());
    std::copy(m.packet_momentum.begin(), m.packet_momentum.end(), momentum.begin());
    auto psi0 = initial_wavepacket(m.geometry, pixels.count(), center, m.packet_width, momentum);
    auto gen = assemble_generator(model, m.alpha);
    std::vector<Projector> bins;
    std::vector<double> rows;
    for (Index s = 0; s < pixels.count(); ++s) {
        bins.push_back(model.pixel_state(s));
        rows.push_back(pixels.positions[s][1]);
    }
    return BuiltModel{std::move(model), std::move(gen), std::move(psi0), std::move(bins), std::move(rows)};
}

namespace {

RealVector bin_populations(const BuiltModel& b, const Matrix& rho) {
    RealVector out(static_cast<Index>(b.bins.size()));
    for (std::size_t k = 0; k < b.bins.size(); ++k) {
        out(static_cast<Index>(k)) = b.bins[k].expectation_in(rho);
    }
    return out;
}

std::string profile_summary(const RealVector& profile) {
    if (profile.size() < 3) {
        return "";
    }
    const auto maxima = interior_maxima(profile);
    std::string idx;
    for (std::size_t k = 0; k < maxima.size(); ++k) {
        idx += fmt::format("{}{}", k ? " " : "", maxima[k]);
    }
    return fmt::format("interior maxima: {} [{}], central visibility: {:.6f}", maxima.size(), idx,
                       central_visibility(profile));
}

}  // namespace

void cmd_master(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log) {
    const BuiltModel b = build_model(cfg);
    if (b.generator.dim() > kDenseLimit) {
        throw DimensionError(fmt::format(
            "master needs a dense {0}x{0} density matrix (limit {1}); run `qjump trajectories` for this config",
            b.generator.dim(), kDenseLimit));
    }
    const auto& d = cfg.dynamics;
    const auto traj = integrate_master(b.generator, DensityMatrix::from_pure(b.initial), d.master_dt,
                                       d.master_horizon, d.master_record_every);
    std::filesystem::create_directories(out);
    std::string obs = "time,observable,value\n";
    for (std::size_t k = 0; k < traj.times.size(); ++k) {
        const double t = traj.times[k];
        const Matrix& rho = traj.states[k].matrix();
        obs += fmt::format("{:.17g},trace,{:.17g}\n", t, traj.states[k].trace());
        obs += fmt::format("{:.17g},min_eigenvalue,{:.17g}\n", t, traj.states[k].min_eigenvalue());
        const RealVector pops = bin_populations(b, rho);
        obs += fmt::format("{:.17g},undetected,{:.17g}\n", t, 1.0 - pops.sum());
        for (Index s = 0; s < pops.size(); ++s) {
            obs += fmt::format("{:.17g},population_{},{:.17g}\n", t, s, pops(s));
        }
    }
    write_file(out / "master_observables.csv", obs);
    const RealVector final_pops = bin_populations(b, traj.states.back().matrix());
    std::string pops = "pixel_index,pixel_row,population\n";
    for (Index s = 0; s < final_pops.size(); ++s) {
        pops += fmt::format("{},{:.17g},{:.17g}\n", s, b.bin_rows[static_cast<std::size_t>(s)], final_pops(s));
    }
    write_file(out / "master_populations.csv", pops);
    log << fmt::format("master: dim {}, {} snapshots to t={}, max trace drift {:.3e}, min eigenvalue {:.3e}\n",
                       b.generator.dim(), traj.times.size(), d.master_horizon, traj.max_trace_drift,
                       traj.min_eigenvalue);
    log << fmt::format("final populations sum {:.12f}; {}\n", final_pops.sum(), profile_summary(final_pops));
}

void cmd_trajectories(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log) {
    const BuiltModel b = build_model(cfg);
    EnsembleConfig ec;
    ec.trajectories = cfg.ensemble.trajectories;
    ec.master_seed = cfg.ensemble.seed;
    ec.mode = cfg.sampler_mode();
    ec.horizon = cfg.dynamics.horizon;
    ec.snapshot_times = cfg.ensemble.snapshot_times;
    ec.workers = cfg.ensemble.workers;
    ec.keep_records = cfg.output.records;
    ec.average_states = b.generator.dim() <= kDenseLimit;
    const auto res = run_ensemble(b.generator, b.initial, ec, b.bins);

    std::filesystem::create_directories(out);
    std::vector<std::string> files;
    {
        std::ostringstream os;
        write_histogram_csv(os, res.histogram, b.bin_rows);
        write_file(out / "histogram.csv", os.str());
        files.push_back("histogram.csv");
    }
    {
        std::ostringstream os;
        write_observables_csv(os, res.snapshots, b.bins);
        write_file(out / "observables.csv", os.str());
        files.push_back("observables.csv");
    }
    if (cfg.output.records) {
        std::string text;
        TargetLabeler label = default_target_label;
        if (b.double_slit) {
            label = [&](const Projector& p) { return pixel_label(*b.double_slit, p); };
        }
        for (std::size_t i = 0; i < res.records.size(); ++i) {
            text += fmt::format("# trajectory {}\n", i);
            text += serialize(res.records[i], label);
        }
        write_file(out / "records.txt", text);
        files.push_back("records.txt");
    }
    if (!b.double_slit) {
        std::vector<double> times;
        for (double t : res.first_jump_times) {
            if (std::isfinite(t)) {
                times.push_back(t);
            }
        }
        std::sort(times.begin(), times.end());
        const double alpha = cfg.model.alpha;
        const double ks = times.empty() ? 1.0
                                        : ks_statistic(times, [alpha](double t) { return 1.0 - std::exp(-alpha * t); },
                                                       res.first_jump_times.size());
        std::string report = "quantity,value\n";
        report += fmt::format("trajectories,{}\n", res.first_jump_times.size());
        report += fmt::format("jumped,{}\n", times.size());
        report += fmt::format("ks_statistic,{:.17g}\n", ks);
        write_file(out / "ks_report.csv", report);
        files.push_back("ks_report.csv");
        log << fmt::format("KS statistic vs 1 - exp(-alpha t): {:.6f} ({} of {} jumped)\n", ks, times.size(),
                           res.first_jump_times.size());
    }
    const std::string effective = cfg.emit();
    write_file(out / "config.effective.ini", effective);
    files.push_back("config.effective.ini");
    nlohmann::ordered_json manifest;
    manifest["command"] = "trajectories";
    manifest["qjump_version"] = "0.3.0";
    manifest["config_hash"] = fmt::format("fnv1a64:{:016x}", fnv1a(effective));
    manifest["seed"] = cfg.ensemble.seed;
    manifest["trajectories"] = cfg.ensemble.trajectories;
    manifest["workers"] = cfg.ensemble.workers;
    manifest["sampler"] = ec.mode.name();
    manifest["eigen_version"] =
        fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION, EIGEN_MINOR_VERSION);
    manifest["fmt_version"] = FMT_VERSION;
    manifest["files"] = files;
    write_file(out / "manifest.json", manifest.dump(2) + "\n");

    std::vector<double> freq;
    for (std::size_t s = 0; s < res.histogram.counts.size(); ++s) {
        freq.push_back(res.histogram.frequency(s));
    }
    log << fmt::format("trajectories: {} run, {} survived; {}\n", res.histogram.total, res.histogram.survived,
                       profile_summary(Eigen::Map<const RealVector>(freq.data(), static_cast<Index>(freq.size()))));
}

void cmd_escape(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log) {
    const BuiltModel b = build_model(cfg);
    const auto& d = cfg.dynamics;
    const double t_max = d.escape_tmax;
    const auto curve = escape_probability(b.generator, b.initial, d.escape_dt, 2.0 * t_max, d.escape_record_every);
    const auto at = [&](double t) {
        const auto it = std::find_if(curve.times.begin(), curve.times.end(),
                                     [&](double x) { return std::abs(x - t) <= 1e-9 * std::max(1.0, t); });
        if (it == curve.times.end()) {
            throw ConfigError("escape_tmax must be a multiple of escape_dt * escape_record_every");
        }
        return curve.p[static_cast<std::size_t>(it - curve.times.begin())];
    };
    const double p_tmax = at(t_max);
    const double p_2tmax = curve.p_esc;
    // reference: Tr(pi_Tmax) from the unnormalized effective evolution
    Vector psi = b.initial.amplitudes();
    const long n = step_count(d.escape_dt, t_max);
    for (long k = 0; k < n; ++k) {
        psi = effective_rk4_step(b.generator, psi, d.escape_dt);
    }
    const double trace_pi = psi.squaredNorm();

    std::filesystem::create_directories(out);
    std::string text = "time,p\n";
    for (std::size_t k = 0; k < curve.times.size(); ++k) {
        text += fmt::format("{:.17g},{:.17g}\n", curve.times[k], curve.p[k]);
    }
    write_file(out / "escape.csv", text);
    std::string summary = "quantity,value\n";
    summary += fmt::format("t_max,{:.17g}\n", t_max);
    summary += fmt::format("p_tmax,{:.17g}\n", p_tmax);
    summary += fmt::format("p_2tmax,{:.17g}\n", p_2tmax);
    summary += fmt::format("stability_gap,{:.17g}\n", p_tmax - p_2tmax);
    summary += fmt::format("trace_pi_tmax,{:.17g}\n", trace_pi);
    write_file(out / "escape_summary.csv", summary);
    log << fmt::format("escape: p(Tmax={}) = {:.12g}, p(2 Tmax) = {:.12g}, gap {:.3e}, |p - Tr(pi)| = {:.3e}\n", t_max,
                       p_tmax, p_2tmax, p_tmax - p_2tmax, std::abs(p_tmax - trace_pi));
}

bool cmd_validate(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log) {
    const BuiltModel b = build_model(cfg);
    const auto& gen = b.generator;
    bool all = true;
    auto check = [&](const std::string& name, bool pass, double residual) {
        all = all && pass;
        log << fmt::format("{} {} {:.3e}\n", pass ? "PASS" : "FAIL", name, residual);
    };

    const SparseMatrix h = gen.hamiltonian().to_sparse();
    check("hamiltonian_hermitian", true, (SparseMatrix(h.adjoint()) - h).norm());
    {
        // rate bookkeeping and the waiting-time premise at the initial state
        const Projector p0 = Projector::from_vector(b.initial.amplitudes());
        double rates = 0.0;
        for (const auto& c : jump_spectrum(gen, p0)) {
            rates += c.rate;
        }
        const double bookkeeping = std::abs(rates + dissipation_rate(gen, p0));
        check("rate_bookkeeping", bookkeeping <= 1e-9, bookkeeping);
        double premise = 0.0;
        try {
            check_waiting_premise(gen, b.initial.amplitudes());
        } catch (const ModeUnsupportedError&) {
            premise = 1.0;
        }
        check("waiting_time_premise", premise == 0.0, premise);
    }
    double stationarity = 0.0;
    for (const auto& q : b.bins) {
        stationarity = std::max(stationarity, gen.apply_rank1(q.vector()).norm());
    }
    check("detector_states_stationary", stationarity <= 1e-12, stationarity);

    if (b.double_slit) {
        const auto& model = *b.double_slit;
        const Index ng = model.grid_dim();
        const auto mask = model.geometry.dirichlet_mask();
        double dirichlet = 0.0;
        for (Index r = 0; r < h.outerSize(); ++r) {
            for (SparseMatrix::InnerIterator it(h, r); it; ++it) {
                if ((it.row() < ng && mask[it.row()]) || (it.col() < ng && mask[it.col()])) {
                    dirichlet = std::max(dirichlet, std::abs(it.value()));
                }
            }
        }
        check("dirichlet_rows_zero", dirichlet == 0.0, dirichlet);
        long misplaced = 0;
        for (const auto& t : model.jump_ops) {
            for (Index r = 0; r < t.outerSize(); ++r) {
                for (SparseMatrix::InnerIterator it(t, r); it; ++it) {
                    if (it.row() < ng || it.col() >= ng) {
                        ++misplaced;
                    }
                }
            }
        }
        check("jump_block_structure", misplaced == 0, static_cast<double>(misplaced));
        const double outside = b.initial.amplitudes().tail(model.pixels.count()).norm();
        check("initial_state_in_grid_block", outside == 0.0, outside);
        try {
            const auto report = verify_decay_bound(model.geometry, model.pixels);
            double worst = 0.0;
            for (const auto& rows : report.rows) {
                for (const auto& row : rows) {
                    if (row.bound > 0.0) {
                        worst = std::max(worst, row.norm / row.bound);
                    }
                }
            }
            check("decay_bound", true, worst);
            log << fmt::format("     K' = {:.6g} (pixel 0); ||kappa|| alone {} bound every r\n", report.k_prime[0],
                               report.naive_holds ? "does" : "does not");
        } catch (const NumericalError& e) {
            check(fmt::format("decay_bound ({})", e.what()), false, 1.0);
        }
        if (cfg.output.dump_operators) {
            std::filesystem::create_directories(out);
            std::ofstream hs(out / "hamiltonian.csv", std::ios::binary);
            write_triplets(hs, h);
            for (std::size_t s = 0; s < model.jump_ops.size(); ++s) {
                std::ofstream ts(out / fmt::format("jump_{}.csv", s), std::ios::binary);
                write_triplets(ts, model.jump_ops[s]);
            }
            log << fmt::format("operators written to {}\n", out.string());
        }
    }
    log << (all ? "validate: all checks passed\n" : "validate: some checks FAILED\n");
    return all;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const DimensionError*>(&e) ||
        dynamic_cast<const ModeUnsupportedError*>(&e) || dynamic_cast<const std::filesystem::filesystem_error*>(&e)) {
        return 2;
    }
    return 3;
}

int run_cli(int argc, char** argv) {
    CLI::App app{"Quantum-jump unraveling of Lindblad dynamics"};
    app.require_subcommand(1);
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
    std::optional<std::string> out_dir;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "config file")->required();
        sub->add_option("--seed", seed, "master seed (overrides the config)");
        sub->add_option("--workers", workers, "worker threads (overrides the config)");
        sub->add_option("--out", out_dir, "output directory (overrides the config)");
    };
    auto* master = app.add_subcommand("master", "integrate the master equation (dense, small dims)");
    auto* traj = app.add_subcommand("trajectories", "run a Monte Carlo ensemble of jump trajectories");
    auto* escape = app.add_subcommand("escape", "escape probability curve of the no-jump evolution");
    auto* validate = app.add_subcommand("validate", "construction-time invariant checks");
    for (auto* sub : {master, traj, escape, validate}) {
        add_common(sub);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    try {
        RunConfig cfg = RunConfig::load(config_path);
        if (seed) {
            cfg.ensemble.seed = *seed;
        }
        if (workers) {
            cfg.ensemble.workers = *workers;
        }
        if (out_dir) {
            cfg.output.directory = *out_dir;
        }
        cfg.validate();
        const std::filesystem::path out(cfg.output.directory);
        if (master->parsed()) {
            cmd_master(cfg, out, std::cout);
        } else if (traj->parsed()) {
            cmd_trajectories(cfg, out, std::cout);
        } else if (escape->parsed()) {
            cmd_escape(cfg, out, std::cout);
        } else if (!cmd_validate(cfg, out, std::cout)) {
            return 3;
        }
    } catch (const std::exception& e) {
        const int code = exit_code_for(e);
        std::cerr << fmt::format("qjump: {}\n", e.what());
        return code;
    }
    return 0;
}

}  // namespace qjump
