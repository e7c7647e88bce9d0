#pragma once

// Data layer: daily hospitalization records, county spatial covariates,
// engineered per-day features, and the regression basis shared by the
// rewards model and the simulator.
//
// A season is exactly H = 152 consecutive days starting May 1. The quantile
// heat index (QHI) is the pooled within-county empirical quantile of the raw
// heat index across every season of that county, so the hottest recorded day
// maps to 1.0 and the coldest to 1/N.

#include <Eigen/Dense>
#include <array>
#include <map>
#include <string>
#include <vector>

#include "broach/common.hpp"
#include "broach/csv.hpp"

namespace broach::data {

constexpr int kSeasonLength = 152;
constexpr int kLambdaDim = 10;
constexpr int kTauDim = 8;
constexpr int kAlertWindow = 14;

// Index maps for the two feature blocks. The day-of-summer spline is a
// 3-function quadratic Bernstein basis on [0,1]; it sums to 1 at every t and
// therefore carries the intercept for both blocks.
enum LambdaFeature : int {
  kLambdaQhi = 0,
  kLambdaQhiHinge25 = 1,
  kLambdaQhiHinge75 = 2,
  kLambdaSpline0 = 3,
  kLambdaSpline1 = 4,
  kLambdaSpline2 = 5,
  kLambdaWeekend = 6,
  kLambdaExcessHeat = 7,
  kLambdaAlerts2wk = 8,
  kLambdaAlertYesterday = 9,
};
enum TauFeature : int {
  kTauQhi = 0,
  kTauSpline0 = 1,
  kTauSpline1 = 2,
  kTauSpline2 = 3,
  kTauWeekend = 4,
  kTauExcessHeat = 5,
  kTauAlerts2wk = 6,
  kTauAlertYesterday = 7,
};

inline const std::array<std::string, kLambdaDim>& lambda_feature_names() {
  static const std::array<std::string, kLambdaDim> names = {
      "qhi",     "qhi_hinge_25", "qhi_hinge_75", "dos_spline_1", "dos_spline_2",
      "dos_spline_3", "weekend",  "excess_heat",  "alerts_2wk",   "alert_yesterday"};
  return names;
}
inline const std::array<std::string, kTauDim>& tau_feature_names() {
  static const std::array<std::string, kTauDim> names = {
      "qhi",     "dos_spline_1", "dos_spline_2", "dos_spline_3",
      "weekend", "excess_heat",  "alerts_2wk",   "alert_yesterday"};
  return names;
}

enum class ClimateRegion : int {
  kMixedHumid = 0,
  kMarine = 1,
  kHotHumid = 2,
  kHotDry = 3,
  kColdEast = 4,
  kColdWest = 5,
};
constexpr int kNumRegions = 6;

inline ClimateRegion parse_region(const std::string& s) {
  if (s == "MixedHumid") return ClimateRegion::kMixedHumid;
  if (s == "Marine") return ClimateRegion::kMarine;
  if (s == "HotHumid") return ClimateRegion::kHotHumid;
  if (s == "HotDry") return ClimateRegion::kHotDry;
  if (s == "ColdEast") return ClimateRegion::kColdEast;
  if (s == "ColdWest") return ClimateRegion::kColdWest;
  throw SchemaError("unknown climate region '" + s + "'");
}

inline std::string region_name(ClimateRegion r) {
  static const char* names[] = {"MixedHumid", "Marine", "HotHumid", "HotDry", "ColdEast", "ColdWest"};
  return names[static_cast<int>(r)];
}

// Hot regions use the southern National Weather Service threshold; everything
// else counts as northern.
inline bool default_northern(ClimateRegion r) {
  return r != ClimateRegion::kHotHumid && r != ClimateRegion::kHotDry;
}

// ---------------------------------------------------------------------------
// Calendar (proleptic Gregorian, Howard Hinnant's algorithms).

inline long days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const long era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = static_cast<unsigned>((153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1);
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<long>(doe) - 719468;
}

struct CivilDate {
  int year;
  int month;
  int day;
};

inline CivilDate civil_from_days(long z) {
  z += 719468;
  const long era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const long y = static_cast<long>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp + (mp < 10 ? 3 : -9);
  return {static_cast<int>(y + (m <= 2)), static_cast<int>(m), static_cast<int>(d)};
}

// 0 = Sunday ... 6 = Saturday.
inline int weekday_from_days(long z) { return static_cast<int>(((z % 7) + 11) % 7); }

inline bool is_weekend(long z) {
  const int wd = weekday_from_days(z);
  return wd == 0 || wd == 6;
}

inline CivilDate parse_date(const std::string& s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') throw SchemaError("bad date '" + s + "' (want YYYY-MM-DD)");
  const int y = static_cast<int>(parse_long(s.substr(0, 4), "date year"));
  const int m = static_cast<int>(parse_long(s.substr(5, 2), "date month"));
  const int d = static_cast<int>(parse_long(s.substr(8, 2), "date day"));
  if (m < 1 || m > 12 || d < 1 || d > 31) throw SchemaError("bad date '" + s + "'");
  return {y, m, d};
}

inline std::string format_date(const CivilDate& c) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", c.year, c.month, c.day);
  return buf;
}

// ---------------------------------------------------------------------------
// Record types.

struct DailyRecord {
  std::string county_id;
  int year = 0;
  CivilDate date{};
  int day_of_summer = 0;
  double heat_index = 0.0;
  int alert = 0;
  long hosp_count = 0;
  long population = 0;
};

struct SpatialFeatures {
  std::string county_id;
  ClimateRegion region = ClimateRegion::kMixedHumid;
  double pop_density = 0.0;
  double median_hh_income = 0.0;
  double democratic_pct = 0.0;
  double broadband_pct = 0.0;
  double pm25 = 0.0;
  bool northern = true;

  // Numeric columns used as prior-network inputs (region is one-hot encoded
  // separately).
  static constexpr int kNumericCount = 5;
  Eigen::VectorXd numeric() const {
    Eigen::VectorXd v(kNumericCount);
    v << pop_density, median_hh_income, democratic_pct, broadband_pct, pm25;
    return v;
  }
};

struct EngineeredDay {
  double qhi = 0.0;
  double excess_heat = 0.0;
  double dos_frac = 0.0;
  double weekend = 0.0;
};

struct BasisVector {
  Eigen::VectorXd lambda_features;  // kLambdaDim
  Eigen::VectorXd tau_features;     // kTauDim
};

// One county-year with engineered features, observed-alert basis matrices,
// and the summaries the simulator needs.
struct Season {
  int year = 0;
  std::vector<DailyRecord> days;       // kSeasonLength rows, day_of_summer order
  std::vector<EngineeredDay> eng;      // parallel to days
  Eigen::MatrixXd x_lambda;            // kSeasonLength x kLambdaDim
  Eigen::MatrixXd x_tau;               // kSeasonLength x kTauDim
  Eigen::VectorXd hosp;                // observed counts
  Eigen::VectorXd pop;                 // population (constant within season)
  std::vector<int> alerts;             // observed alert indicator per day
  int alert_count = 0;
  double mean_rate = 0.0;              // mean daily hosp_count / population
};

struct CountyData {
  std::string id;
  SpatialFeatures spatial;
  std::vector<Season> seasons;  // ascending year

  const Season& season(int year) const {
    for (const auto& s : seasons)
      if (s.year == year) return s;
    throw ConfigError("county " + id + " has no season for year " + std::to_string(year));
  }
  bool has_year(int year) const {
    for (const auto& s : seasons)
      if (s.year == year) return true;
    return false;
  }
};

struct Dataset {
  std::vector<CountyData> counties;  // ascending county id

  int county_index(const std::string& id) const {
    for (std::size_t i = 0; i < counties.size(); ++i)
      if (counties[i].id == id) return static_cast<int>(i);
    throw ConfigError("unknown county id '" + id + "'");
  }
  std::vector<int> region_members(ClimateRegion r) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < counties.size(); ++i)
      if (counties[i].spatial.region == r) out.push_back(static_cast<int>(i));
    return out;
  }
  std::vector<int> years() const {
    std::vector<int> ys;
    for (const auto& c : counties)
      for (const auto& s : c.seasons)
        if (std::find(ys.begin(), ys.end(), s.year) == ys.end()) ys.push_back(s.year);
    std::sort(ys.begin(), ys.end());
    return ys;
  }
  std::size_t total_rows() const {
    std::size_t n = 0;
    for (const auto& c : counties) n += c.seasons.size() * kSeasonLength;
    return n;
  }
};

// ---------------------------------------------------------------------------
// Feature engineering.

// Pooled empirical quantile: fraction of pooled values <= x (right-continuous
// CDF). Strictly increasing N-day pool maps the coldest day to 1/N and the
// hottest to 1.0.
class QhiScale {
 public:
  explicit QhiScale(std::vector<double> pooled) : sorted_(std::move(pooled)) {
    if (sorted_.empty()) throw ConfigError("QHI scale needs at least one pooled value");
    std::sort(sorted_.begin(), sorted_.end());
  }
  double operator()(double x) const {
    const auto ub = std::upper_bound(sorted_.begin(), sorted_.end(), x);
    return static_cast<double>(ub - sorted_.begin()) / static_cast<double>(sorted_.size());
  }

 private:
  std::vector<double> sorted_;
};

// excess_heat(t) = qhi(t) - mean(qhi of the previous three days), truncated to
// the available history at the season start (0 on day 0).
inline double excess_heat_at(const std::vector<double>& qhi, int t) {
  if (t <= 0) return 0.0;
  const int k = std::min(t, 3);
  double s = 0.0;
  for (int i = t - k; i < t; ++i) s += qhi[static_cast<std::size_t>(i)];
  return qhi[static_cast<std::size_t>(t)] - s / static_cast<double>(k);
}

// Quadratic Bernstein B-spline basis on [0,1] (knots 0,0,0,1,1,1): a
// partition of unity, so the intercept lives in its span.
inline std::array<double, 3> dos_spline(double t) {
  const double u = std::clamp(t, 0.0, 1.0);
  return {(1.0 - u) * (1.0 - u), 2.0 * u * (1.0 - u), u * u};
}

inline Eigen::VectorXd lambda_basis(const EngineeredDay& d, double alerts_2wk_count, double alert_yesterday) {
  const auto spl = dos_spline(d.dos_frac);
  Eigen::VectorXd x(kLambdaDim);
  x(kLambdaQhi) = d.qhi;
  x(kLambdaQhiHinge25) = std::max(0.0, d.qhi - 0.25);
  x(kLambdaQhiHinge75) = std::max(0.0, d.qhi - 0.75);
  x(kLambdaSpline0) = spl[0];
  x(kLambdaSpline1) = spl[1];
  x(kLambdaSpline2) = spl[2];
  x(kLambdaWeekend) = d.weekend;
  x(kLambdaExcessHeat) = d.excess_heat;
  x(kLambdaAlerts2wk) = alerts_2wk_count / static_cast<double>(kAlertWindow);
  x(kLambdaAlertYesterday) = alert_yesterday;
  return x;
}

inline Eigen::VectorXd tau_basis(const EngineeredDay& d, double alerts_2wk_count, double alert_yesterday) {
  const auto spl = dos_spline(d.dos_frac);
  Eigen::VectorXd x(kTauDim);
  x(kTauQhi) = d.qhi;
  x(kTauSpline0) = spl[0];
  x(kTauSpline1) = spl[1];
  x(kTauSpline2) = spl[2];
  x(kTauWeekend) = d.weekend;
  x(kTauExcessHeat) = d.excess_heat;
  x(kTauAlerts2wk) = alerts_2wk_count / static_cast<double>(kAlertWindow);
  x(kTauAlertYesterday) = alert_yesterday;
  return x;
}

inline BasisVector basis_expand(const EngineeredDay& d, double alerts_2wk_count, double alert_yesterday) {
  if (alerts_2wk_count < 0 || alerts_2wk_count > kAlertWindow)
    throw ConfigError("alerts_2wk count outside [0,14]");
  return {lambda_basis(d, alerts_2wk_count, alert_yesterday), tau_basis(d, alerts_2wk_count, alert_yesterday)};
}

// Trailing 14-day alert count (days t-14..t-1; today excluded) for a season-
// local alert history.
inline int alerts_2wk_at(const std::vector<int>& alerts, int t) {
  int c = 0;
  for (int i = std::max(0, t - kAlertWindow); i < t; ++i) c += alerts[static_cast<std::size_t>(i)];
  return c;
}

// ---------------------------------------------------------------------------
// Loading and validation.

namespace detail {

inline void finalize_county(CountyData& county) {
  std::vector<double> pooled;
  for (const auto& s : county.seasons)
    for (const auto& r : s.days) pooled.push_back(r.heat_index);
  const QhiScale scale(std::move(pooled));

  for (auto& s : county.seasons) {
    std::vector<double> qhi(kSeasonLength);
    for (int t = 0; t < kSeasonLength; ++t) qhi[t] = scale(s.days[t].heat_index);
    s.eng.resize(kSeasonLength);
    s.alerts.resize(kSeasonLength);
    s.x_lambda.resize(kSeasonLength, kLambdaDim);
    s.x_tau.resize(kSeasonLength, kTauDim);
    s.hosp.resize(kSeasonLength);
    s.pop.resize(kSeasonLength);
    double rate_sum = 0.0;
    for (int t = 0; t < kSeasonLength; ++t) {
      const auto& r = s.days[t];
      EngineeredDay e;
      e.qhi = qhi[t];
      e.excess_heat = excess_heat_at(qhi, t);
      e.dos_frac = static_cast<double>(t) / static_cast<double>(kSeasonLength - 1);
      e.weekend = is_weekend(days_from_civil(r.date.year, r.date.month, r.date.day)) ? 1.0 : 0.0;
      s.eng[t] = e;
      s.alerts[t] = r.alert;
      const int a2 = alerts_2wk_at(s.alerts, t);
      const double ay = t > 0 ? static_cast<double>(s.alerts[t - 1]) : 0.0;
      s.x_lambda.row(t) = lambda_basis(e, a2, ay).transpose();
      s.x_tau.row(t) = tau_basis(e, a2, ay).transpose();
      s.hosp(t) = static_cast<double>(r.hosp_count);
      s.pop(t) = static_cast<double>(r.population);
      rate_sum += static_cast<double>(r.hosp_count) / static_cast<double>(r.population);
    }
    s.alert_count = 0;
    for (int a : s.alerts) s.alert_count += a;
    s.mean_rate = rate_sum / kSeasonLength;
  }
}

}  // namespace detail

inline std::vector<SpatialFeatures> load_spatial_csv(const std::string& path) {
  const CsvTable t = read_csv(path);
  const std::vector<std::string> want = {"county_id",      "climate_region", "pop_density", "median_hh_income",
                                         "democratic_pct", "broadband_pct",  "pm25"};
  if (t.header != want) throw SchemaError(path + ": unexpected spatial header");
  std::vector<SpatialFeatures> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    SpatialFeatures f;
    f.county_id = r[0];
    f.region = parse_region(r[1]);
    f.pop_density = parse_double(r[2], "pop_density");
    f.median_hh_income = parse_double(r[3], "median_hh_income");
    f.democratic_pct = parse_double(r[4], "democratic_pct");
    f.broadband_pct = parse_double(r[5], "broadband_pct");
    f.pm25 = parse_double(r[6], "pm25");
    f.northern = default_northern(f.region);
    if (f.pop_density <= 0) throw SchemaError(path + ": pop_density must be positive for " + f.county_id);
    if (f.median_hh_income <= 0) throw SchemaError(path + ": median_hh_income must be positive for " + f.county_id);
    if (f.democratic_pct < 0 || f.democratic_pct > 1)
      throw SchemaError(path + ": democratic_pct outside [0,1] for " + f.county_id);
    if (f.broadband_pct < 0 || f.broadband_pct > 1)
      throw SchemaError(path + ": broadband_pct outside [0,1] for " + f.county_id);
    if (f.pm25 < 0) throw SchemaError(path + ": pm25 must be non-negative for " + f.county_id);
    for (const auto& prev : out)
      if (prev.county_id == f.county_id) throw SchemaError(path + ": duplicate spatial row for " + f.county_id);
    out.push_back(std::move(f));
  }
  return out;
}

inline Dataset assemble_dataset(std::vector<DailyRecord> records, const std::vector<SpatialFeatures>& spatial) {
  std::map<std::string, std::map<int, std::vector<DailyRecord>>> grouped;
  for (auto& r : records) grouped[r.county_id][r.year].push_back(std::move(r));

  Dataset ds;
  for (auto& [county_id, by_year] : grouped) {
    CountyData county;
    county.id = county_id;
    bool found = false;
    for (const auto& f : spatial)
      if (f.county_id == county_id) {
        county.spatial = f;
        found = true;
        break;
      }
    if (!found) throw SchemaError("county " + county_id + " has no spatial features row");

    for (auto& [year, days] : by_year) {
      if (days.size() != kSeasonLength)
        throw SchemaError("incomplete season: county " + county_id + " year " + std::to_string(year) + " has " +
                          std::to_string(days.size()) + " rows, expected " + std::to_string(kSeasonLength));
      std::sort(days.begin(), days.end(),
                [](const DailyRecord& a, const DailyRecord& b) { return a.day_of_summer < b.day_of_summer; });
      const long may1 = days_from_civil(year, 5, 1);
      const long season_pop = days[0].population;
      for (int t = 0; t < kSeasonLength; ++t) {
        const auto& r = days[t];
        if (r.day_of_summer != t)
          throw SchemaError("county " + county_id + " year " + std::to_string(year) +
                            ": duplicate or missing day_of_summer " + std::to_string(t));
        const long z = days_from_civil(r.date.year, r.date.month, r.date.day);
        if (z != may1 + t)
          throw SchemaError("county " + county_id + " year " + std::to_string(year) + ": date " +
                            format_date(r.date) + " does not match day_of_summer " + std::to_string(t));
        if (r.alert != 0 && r.alert != 1)
          throw SchemaError("county " + county_id + ": alert must be 0 or 1, got " + std::to_string(r.alert));
        if (r.hosp_count < 0) throw SchemaError("county " + county_id + ": negative hosp_count");
        if (r.population <= 0) throw SchemaError("county " + county_id + ": population must be positive");
        if (r.hosp_count > r.population) throw SchemaError("county " + county_id + ": hosp_count exceeds population");
        if (!std::isfinite(r.heat_index)) throw SchemaError("county " + county_id + ": non-finite heat_index");
        if (r.population != season_pop)
          throw SchemaError("county " + county_id + " year " + std::to_string(year) +
                            ": population must be constant within a season");
      }
      Season s;
      s.year = year;
      s.days = std::move(days);
      county.seasons.push_back(std::move(s));
    }
    detail::finalize_county(county);
    ds.counties.push_back(std::move(county));
  }
  for (const auto& f : spatial) {
    bool used = false;
    for (const auto& c : ds.counties) used = used || c.id == f.county_id;
    if (!used) throw SchemaError("spatial row for county " + f.county_id + " with no daily records");
  }
  if (ds.counties.empty()) throw SchemaError("dataset has no counties");
  return ds;
}

inline Dataset load_dataset(const std::string& daily_path, const std::string& spatial_path) {
  const CsvTable t = read_csv(daily_path);
  const std::vector<std::string> want = {"county_id", "year",  "date",       "day_of_summer",
                                         "heat_index", "alert", "hosp_count", "population"};
  if (t.header != want) throw SchemaError(daily_path + ": unexpected daily header");
  std::vector<DailyRecord> recs;
  recs.reserve(t.rows.size());
  for (const auto& r : t.rows) {
    DailyRecord d;
    d.county_id = r[0];
    d.year = static_cast<int>(parse_long(r[1], "year"));
    d.date = parse_date(r[2]);
    d.day_of_summer = static_cast<int>(parse_long(r[3], "day_of_summer"));
    d.heat_index = parse_double(r[4], "heat_index");
    d.alert = static_cast<int>(parse_long(r[5], "alert"));
    d.hosp_count = parse_long(r[6], "hosp_count");
    d.population = parse_long(r[7], "population");
    if (d.day_of_summer < 0 || d.day_of_summer >= kSeasonLength)
      throw SchemaError(daily_path + ": day_of_summer outside [0," + std::to_string(kSeasonLength - 1) + "]");
    recs.push_back(std::move(d));
  }
  return assemble_dataset(std::move(recs), load_spatial_csv(spatial_path));
}

inline void write_daily_csv(const std::string& path, const Dataset& ds) {
  CsvWriter w(path, {"county_id", "year", "date", "day_of_summer", "heat_index", "alert", "hosp_count", "population"});
  for (const auto& c : ds.counties)
    for (const auto& s : c.seasons)
      for (const auto& r : s.days)
        w.write_row_strings({r.county_id, std::to_string(r.year), format_date(r.date),
                             std::to_string(r.day_of_summer), format_double(r.heat_index), std::to_string(r.alert),
                             std::to_string(r.hosp_count), std::to_string(r.population)});
}

inline void write_spatial_csv(const std::string& path, const Dataset& ds) {
  CsvWriter w(path, {"county_id", "climate_region", "pop_density", "median_hh_income", "democratic_pct",
                     "broadband_pct", "pm25"});
  for (const auto& c : ds.counties) {
    const auto& f = c.spatial;
    w.write_row_strings({f.county_id, region_name(f.region), format_double(f.pop_density),
                         format_double(f.median_hh_income), format_double(f.democratic_pct),
                         format_double(f.broadband_pct), format_double(f.pm25)});
  }
}

}  // namespace broach::data
