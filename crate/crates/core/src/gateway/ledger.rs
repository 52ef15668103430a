//! Exact-decimal cost accounting.
//!
//! Every amount is a [`Usd`] backed by a base-10 decimal, so a ledger total
//! is the exact sum of its entries no matter how many there are or in what
//! order they were appended.

use std::collections::BTreeMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use super::{GatewayError, ModelRole, Usage};

const PER_MILLION: i64 = 1_000_000;

/// US dollars, exact to 28 significant digits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Usd(#[serde(with = "rust_decimal::serde::str")] Decimal);

impl Usd {
    pub const ZERO: Usd = Usd(Decimal::ZERO);

    pub fn new(amount: Decimal) -> Self {
        Usd(amount.normalize())
    }

    pub fn from_cents(cents: i64) -> Self {
        Usd(Decimal::new(cents, 2))
    }

    pub fn amount(self) -> Decimal {
        self.0
    }

    /// Rounded to cents, half away from zero, with thousands separators: `$1,226.48`.
    pub fn to_table_string(self) -> String {
        let rounded = self
            .0
            .round_dp_with_strategy(2, rust_decimal::RoundingStrategy::MidpointAwayFromZero);
        let text = format!("{rounded:.2}");
        let (sign, digits) = match text.strip_prefix('-') {
            Some(rest) => ("-", rest),
            None => ("", text.as_str()),
        };
        let (whole, frac) = digits.split_once('.').unwrap_or((digits, "00"));
        let mut grouped = String::new();
        for (i, ch) in whole.chars().enumerate() {
            if i > 0 && (whole.len() - i) % 3 == 0 {
                grouped.push(',');
            }
            grouped.push(ch);
        }
        format!("{sign}${grouped}.{frac}")
    }
}

impl fmt::Display for Usd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}", self.0.normalize())
    }
}

impl FromStr for Usd {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim().trim_start_matches('$').replace(',', "");
        Decimal::from_str(&trimmed)
            .map(Usd::new)
            .map_err(|e| GatewayError::Config(format!("bad dollar amount {s:?}: {e}")))
    }
}

impl Add for Usd {
    type Output = Usd;

    fn add(self, rhs: Usd) -> Usd {
        Usd(self.0 + rhs.0)
    }
}

impl AddAssign for Usd {
    fn add_assign(&mut self, rhs: Usd) {
        self.0 += rhs.0;
    }
}

impl Sum for Usd {
    fn sum<I: Iterator<Item = Usd>>(iter: I) -> Usd {
        iter.fold(Usd::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a Usd> for Usd {
    fn sum<I: Iterator<Item = &'a Usd>>(iter: I) -> Usd {
        iter.copied().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Price {
    #[serde(with = "rust_decimal::serde::str")]
    pub input_usd_per_million: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub output_usd_per_million: Decimal,
}

impl Price {
    pub fn new(input_usd_per_million: Decimal, output_usd_per_million: Decimal) -> Result<Self, GatewayError> {
        if input_usd_per_million.is_sign_negative() || output_usd_per_million.is_sign_negative() {
            return Err(GatewayError::Config("prices must be non-negative".into()));
        }
        Ok(Price {
            input_usd_per_million,
            output_usd_per_million,
        })
    }

    /// Same rate for input and output.
    pub fn flat(usd_per_million: Decimal) -> Result<Self, GatewayError> {
        Price::new(usd_per_million, usd_per_million)
    }
}

/// Per-backend prices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable(BTreeMap<String, Price>);

impl PriceTable {
    pub fn new() -> Self {
        PriceTable::default()
    }

    pub fn with(mut self, backend_id: impl Into<String>, price: Price) -> Self {
        self.0.insert(backend_id.into(), price);
        self
    }

    pub fn insert(&mut self, backend_id: impl Into<String>, price: Price) {
        self.0.insert(backend_id.into(), price);
    }

    pub fn get(&self, backend_id: &str) -> Option<&Price> {
        self.0.get(backend_id)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        for (id, p) in &self.0 {
            if p.input_usd_per_million.is_sign_negative() || p.output_usd_per_million.is_sign_negative() {
                return Err(GatewayError::Config(format!("negative price for backend {id}")));
            }
        }
        Ok(())
    }
}

/// Cost of one call. Thinking tokens are billed at the output rate.
pub fn cost_of(usage: &Usage, price: &Price) -> Usd {
    let input = Decimal::from(usage.input_tokens) * price.input_usd_per_million;
    let output = Decimal::from(usage.output_tokens + usage.thinking_tokens) * price.output_usd_per_million;
    Usd::new((input + output) / Decimal::from(PER_MILLION))
}

/// Upper bound on spend for a pipeline that makes `calls_per_round` calls
/// of `tokens_per_call` tokens for `rounds` rounds, repeated `parallel_runs`
/// times.
pub fn estimate_max_budget(
    tokens_per_call: u64,
    calls_per_round: u64,
    rounds: u64,
    parallel_runs: u64,
    usd_per_million: Decimal,
) -> Result<Usd, GatewayError> {
    if tokens_per_call == 0 || calls_per_round == 0 || rounds == 0 || parallel_runs == 0 {
        return Err(GatewayError::Config("estimate inputs must be positive".into()));
    }
    if usd_per_million <= Decimal::ZERO {
        return Err(GatewayError::Config("rate must be positive".into()));
    }
    let tokens = Decimal::from(tokens_per_call)
        .checked_mul(Decimal::from(calls_per_round))
        .and_then(|t| t.checked_mul(Decimal::from(rounds)))
        .and_then(|t| t.checked_mul(Decimal::from(parallel_runs)))
        .ok_or_else(|| GatewayError::Config("estimate overflows".into()))?;
    let usd = tokens
        .checked_mul(usd_per_million)
        .ok_or_else(|| GatewayError::Config("estimate overflows".into()))?
        / Decimal::from(PER_MILLION);
    Ok(Usd::new(usd))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub seq: u64,
    pub run_id: String,
    pub role: ModelRole,
    pub backend_id: String,
    pub usage: Usage,
    pub usd: Usd,
}

/// Append-only list of call costs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    entries: Vec<CostEntry>,
    #[serde(default, skip_serializing_if = "PriceTable::is_empty")]
    prices: PriceTable,
}

impl CostLedger {
    pub fn new(prices: PriceTable) -> Self {
        CostLedger {
            entries: Vec::new(),
            prices,
        }
    }

    pub fn append(&mut self, run_id: &str, role: ModelRole, backend_id: &str, usage: Usage, usd: Usd) -> &CostEntry {
        let seq = self.entries.len() as u64;
        self.entries.push(CostEntry {
            seq,
            run_id: run_id.to_string(),
            role,
            backend_id: backend_id.to_string(),
            usage,
            usd,
        });
        self.entries.last().expect("just pushed")
    }

    pub fn entries(&self) -> &[CostEntry] {
        &self.entries
    }

    pub fn prices(&self) -> &PriceTable {
        &self.prices
    }

    pub fn total(&self) -> Usd {
        self.entries.iter().map(|e| e.usd).sum()
    }

    pub fn total_tokens(&self) -> u64 {
        self.entries.iter().map(|e| e.usage.total()).sum()
    }

    pub fn by_role(&self) -> BTreeMap<ModelRole, Usd> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.role).or_insert(Usd::ZERO) += e.usd;
        }
        out
    }

    pub fn by_run(&self) -> BTreeMap<String, Usd> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.run_id.clone()).or_insert(Usd::ZERO) += e.usd;
        }
        out
    }

    /// Recomputes every entry from its usage, using `prices` (or the
    /// ledger's own table when `None`).
    pub fn reprice(&self, prices: Option<&PriceTable>) -> Result<CostLedger, GatewayError> {
        let table = prices.unwrap_or(&self.prices);
        if table.is_empty() {
            return Err(GatewayError::Config("no price table available".into()));
        }
        let mut out = CostLedger::new(table.clone());
        for e in &self.entries {
            let price = table
                .get(&e.backend_id)
                .ok_or_else(|| GatewayError::Config(format!("no price for backend {}", e.backend_id)))?;
            out.append(&e.run_id, e.role, &e.backend_id, e.usage, cost_of(&e.usage, price));
        }
        Ok(out)
    }

    pub fn report(&self) -> CostReport {
        CostReport {
            runs: self.by_run(),
            roles: self.by_role(),
            total: self.total(),
            total_tokens: self.total_tokens(),
            calls: self.entries.len(),
        }
    }

    pub fn to_csv(&self) -> Result<String, GatewayError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "seq",
            "run_id",
            "role",
            "backend_id",
            "input_tokens",
            "output_tokens",
            "thinking_tokens",
            "usd",
        ])
        .map_err(csv_err)?;
        for e in &self.entries {
            w.write_record([
                e.seq.to_string(),
                e.run_id.clone(),
                e.role.to_string(),
                e.backend_id.clone(),
                e.usage.input_tokens.to_string(),
                e.usage.output_tokens.to_string(),
                e.usage.thinking_tokens.to_string(),
                e.usd.amount().normalize().to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> GatewayError {
    GatewayError::Config(format!("csv: {e}"))
}

/// Totals in the shape of a per-run cost table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub runs: BTreeMap<String, Usd>,
    pub roles: BTreeMap<ModelRole, Usd>,
    pub total: Usd,
    pub total_tokens: u64,
    pub calls: usize,
}

impl CostReport {
    /// Rows `Run <id>` for each run, then a `Combined` row, then a per-role
    /// breakdown.
    pub fn to_table(&self, label: &str) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        for (run, usd) in &self.runs {
            rows.push((format!("{label} Run {run}"), usd.to_table_string()));
        }
        rows.push((format!("{label} Combined"), self.total.to_table_string()));
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(3).max(4);
        let mut out = format!("{:<width$}  {:>12}\n", "Run", "Total Cost");
        out.push_str(&format!("{}\n", "-".repeat(width + 14)));
        for (i, (name, usd)) in rows.iter().enumerate() {
            if i + 1 == rows.len() {
                out.push_str(&format!("{}\n", "-".repeat(width + 14)));
            }
            out.push_str(&format!("{name:<width$}  {usd:>12}\n"));
        }
        out.push('\n');
        out.push_str(&format!("{:<width$}  {:>12}\n", "Role", "Cost"));
        for (role, usd) in &self.roles {
            out.push_str(&format!("{:<width$}  {:>12}\n", role.to_string(), usd.to_table_string()));
        }
        out.push_str(&format!("\n{} calls, {} tokens\n", self.calls, self.total_tokens));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,usd\n");
        for (run, usd) in &self.runs {
            out.push_str(&format!("run:{run},{}\n", usd.amount().normalize()));
        }
        for (role, usd) in &self.roles {
            out.push_str(&format!("role:{role},{}\n", usd.amount().normalize()));
        }
        out.push_str(&format!("combined,{}\n", self.total.amount().normalize()));
        out
    }
}
