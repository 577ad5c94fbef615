//! Request arrival streams: open-loop bursty traces, closed-loop sources that
//! hold a fixed number of requests in flight, sinusoidal rates, and CSV
//! trace files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::sim::{SimRng, SimTime, Substream};

pub type RequestId = u64;

pub const TRACE_HEADER: &str = "arrived_at,num_prefill_tokens,num_decode_tokens";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestTemplate {
    pub arrival_offset: SimTime,
    pub num_prefill_tokens: u32,
    /// Carried for the simulator only; routing policies never see it.
    pub num_decode_tokens: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(flatten)]
    pub mode: WorkloadMode,
    #[serde(default = "default_sigma")]
    pub interarrival_sigma: f64,
    #[serde(default)]
    pub lengths: LengthSource,
    #[serde(default)]
    pub inflation: Inflation,
}

fn default_sigma() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WorkloadMode {
    OpenLoop {
        target_qps: f64,
    },
    /// Keeps `concurrency` requests in the system. With `pacing_qps` set,
    /// new requests are additionally released no faster than an open-loop
    /// stream at that rate.
    ClosedLoop {
        concurrency: usize,
        #[serde(default)]
        pacing_qps: Option<f64>,
    },
    Sinusoidal {
        qps_low: f64,
        qps_high: f64,
        period: f64,
    },
    /// Replays a trace file verbatim (arrival times and lengths).
    Trace {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum LengthSource {
    Synthetic {
        prompt: LengthDist,
        decode: LengthDist,
    },
    /// Draws (prompt, decode) pairs uniformly from the rows of a trace file.
    Trace { path: PathBuf },
}

impl Default for LengthSource {
    fn default() -> Self {
        LengthSource::Synthetic {
            prompt: LengthDist {
                median: 128.0,
                sigma: 1.0,
                min: 1,
                max: 16384,
            },
            decode: LengthDist {
                median: 256.0,
                sigma: 1.0,
                min: 1,
                max: 16384,
            },
        }
    }
}

/// Log-normal token-count distribution truncated to `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub median: f64,
    pub sigma: f64,
    pub min: u32,
    pub max: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inflation {
    pub prompt_fraction: f64,
    pub prompt_factor: f64,
    pub decode_fraction: f64,
    pub decode_factor: f64,
}

impl Default for Inflation {
    fn default() -> Self {
        Inflation {
            prompt_fraction: 0.0,
            prompt_factor: 1.0,
            decode_fraction: 0.0,
            decode_factor: 1.0,
        }
    }
}

impl Inflation {
    /// 5% of prompts and, independently, 5% of decodes grown 10x.
    pub fn heavy_tail() -> Self {
        Inflation {
            prompt_fraction: 0.05,
            prompt_factor: 10.0,
            decode_fraction: 0.05,
            decode_factor: 10.0,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, frac, factor) in [
            ("prompt", self.prompt_fraction, self.prompt_factor),
            ("decode", self.decode_fraction, self.decode_factor),
        ] {
            if !(0.0..=1.0).contains(&frac) {
                return Err(SimError::InvalidWorkload(format!(
                    "{name} inflation fraction {frac} outside [0, 1]"
                )));
            }
            if !(factor >= 1.0) {
                return Err(SimError::InvalidWorkload(format!(
                    "{name} inflation factor {factor} below 1"
                )));
            }
        }
        Ok(())
    }
}

/// Multiplies a token count, rounding up.
pub fn inflate(tokens: u32, factor: f64) -> u32 {
    let scaled = (tokens as f64 * factor).ceil();
    scaled.min(u32::MAX as f64) as u32
}

/// Log-normal interarrival law whose mean is `1 / qps`.
#[derive(Clone, Copy, Debug)]
pub struct Interarrival {
    dist: LogNormal<f64>,
}

impl Interarrival {
    pub fn new(qps: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(SimError::InvalidWorkload(format!(
                "interarrival sigma must be positive, got {sigma}"
            )));
        }
        if !(qps > 0.0 && qps.is_finite()) {
            return Err(SimError::InvalidWorkload(format!(
                "qps must be positive, got {qps}"
            )));
        }
        let mu = (1.0 / qps).ln() - sigma * sigma / 2.0;
        let dist = LogNormal::new(mu, sigma)
            .map_err(|e| SimError::InvalidWorkload(format!("interarrival law: {e}")))?;
        Ok(Self { dist })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.dist.sample(rng)
    }
}

/// Draws request lengths, applying inflation.
#[derive(Clone, Debug)]
pub struct LengthSampler {
    kind: SamplerKind,
    inflation: Inflation,
}

#[derive(Clone, Debug)]
enum SamplerKind {
    Synthetic {
        prompt: (LogNormal<f64>, u32, u32),
        decode: (LogNormal<f64>, u32, u32),
    },
    Empirical(Vec<(u32, u32)>),
}

impl LengthSampler {
    pub fn new(source: &LengthSource, inflation: Inflation) -> Result<Self> {
        inflation.validate()?;
        let kind = match source {
            LengthSource::Synthetic { prompt, decode } => SamplerKind::Synthetic {
                prompt: truncated_lognormal(prompt, "prompt")?,
                decode: truncated_lognormal(decode, "decode")?,
            },
            LengthSource::Trace { path } => {
                let rows: Vec<_> = load_trace(path)?
                    .into_iter()
                    .map(|t| (t.num_prefill_tokens, t.num_decode_tokens))
                    .collect();
                if rows.is_empty() {
                    return Err(SimError::InvalidWorkload(format!(
                        "length source {} has no rows",
                        path.display()
                    )));
                }
                SamplerKind::Empirical(rows)
            }
        };
        Ok(Self { kind, inflation })
    }

    /// Base lengths, then one independent inflation coin for each side.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (u32, u32) {
        let (prompt, decode) = match &self.kind {
            SamplerKind::Synthetic { prompt, decode } => {
                (draw_truncated(prompt, rng), draw_truncated(decode, rng))
            }
            SamplerKind::Empirical(rows) => rows[rng.random_range(0..rows.len())],
        };
        let inflate_prompt = rng.random::<f64>() < self.inflation.prompt_fraction;
        let inflate_decode = rng.random::<f64>() < self.inflation.decode_fraction;
        let prompt = if inflate_prompt {
            inflate(prompt, self.inflation.prompt_factor)
        } else {
            prompt
        };
        let decode = if inflate_decode {
            inflate(decode, self.inflation.decode_factor)
        } else {
            decode
        };
        (prompt, decode)
    }
}

fn truncated_lognormal(d: &LengthDist, what: &str) -> Result<(LogNormal<f64>, u32, u32)> {
    if !(d.median > 0.0) || !(d.sigma > 0.0) {
        return Err(SimError::InvalidWorkload(format!(
            "{what} length law needs positive median and sigma"
        )));
    }
    if d.min == 0 || d.min > d.max {
        return Err(SimError::InvalidWorkload(format!(
            "{what} length bounds [{}, {}] invalid",
            d.min, d.max
        )));
    }
    let dist = LogNormal::new(d.median.ln(), d.sigma)
        .map_err(|e| SimError::InvalidWorkload(format!("{what} length law: {e}")))?;
    Ok((dist, d.min, d.max))
}

fn draw_truncated((dist, lo, hi): &(LogNormal<f64>, u32, u32), rng: &mut ChaCha8Rng) -> u32 {
    let x = dist.sample(rng).round();
    x.clamp(*lo as f64, *hi as f64) as u32
}

fn next_after(prev: f64, t: f64) -> f64 {
    if t > prev {
        t
    } else {
        prev.next_up()
    }
}

/// Open-loop stream over `[0, duration)` at `target_qps`.
pub fn generate_open_loop(
    spec: &WorkloadSpec,
    rng: &mut SimRng,
    duration: SimTime,
) -> Result<Vec<RequestTemplate>> {
    let WorkloadMode::OpenLoop { target_qps } = spec.mode else {
        return Err(SimError::InvalidWorkload(
            "generate_open_loop needs mode = open_loop".into(),
        ));
    };
    let gaps = Interarrival::new(target_qps, spec.interarrival_sigma)?;
    let lengths = LengthSampler::new(&spec.lengths, spec.inflation)?;
    Ok(thinned_stream(&gaps, &lengths, rng, duration, |_| 1.0))
}

/// Arrivals with rate `mid + amp * sin(2 pi t / period)`, drawn by thinning
/// a `qps_high` stream.
pub fn generate_sinusoidal(
    spec: &WorkloadSpec,
    rng: &mut SimRng,
    duration: SimTime,
) -> Result<Vec<RequestTemplate>> {
    let WorkloadMode::Sinusoidal {
        qps_low,
        qps_high,
        period,
    } = spec.mode
    else {
        return Err(SimError::InvalidWorkload(
            "generate_sinusoidal needs mode = sinusoidal".into(),
        ));
    };
    if !(qps_low > 0.0) {
        return Err(SimError::InvalidWorkload(format!(
            "qps_low must be positive, got {qps_low}"
        )));
    }
    if qps_low > qps_high {
        return Err(SimError::InvalidWorkload(format!(
            "qps_low {qps_low} exceeds qps_high {qps_high}"
        )));
    }
    if !(period > 0.0) {
        return Err(SimError::InvalidWorkload(format!(
            "period must be positive, got {period}"
        )));
    }
    let gaps = Interarrival::new(qps_high, spec.interarrival_sigma)?;
    let lengths = LengthSampler::new(&spec.lengths, spec.inflation)?;
    let rate = |t: f64| sinusoid_rate(qps_low, qps_high, period, t);
    Ok(thinned_stream(&gaps, &lengths, rng, duration, |t| {
        rate(t) / qps_high
    }))
}

pub fn sinusoid_rate(qps_low: f64, qps_high: f64, period: f64, t: f64) -> f64 {
    let mid = (qps_low + qps_high) / 2.0;
    let amp = (qps_high - qps_low) / 2.0;
    mid + amp * (2.0 * std::f64::consts::PI * t / period).sin()
}

fn thinned_stream(
    gaps: &Interarrival,
    lengths: &LengthSampler,
    rng: &mut SimRng,
    duration: SimTime,
    accept: impl Fn(f64) -> f64,
) -> Vec<RequestTemplate> {
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut last = f64::NEG_INFINITY;
    loop {
        t += gaps.sample(rng.stream(Substream::Arrivals));
        if t >= duration.as_secs() {
            break;
        }
        let p = accept(t);
        // the uniform is only drawn when thinning can reject, so a flat rate
        // consumes exactly the open-loop draw sequence
        if p < 1.0 && rng.stream(Substream::Arrivals).random::<f64>() >= p {
            continue;
        }
        let at = next_after(last, t);
        last = at;
        let (num_prefill_tokens, num_decode_tokens) =
            lengths.sample(rng.stream(Substream::Lengths));
        out.push(RequestTemplate {
            arrival_offset: SimTime::from_secs(at),
            num_prefill_tokens,
            num_decode_tokens,
        });
    }
    out
}

/// Closed-loop arrival source. The engine asks for a new template whenever
/// the in-system count drops below `concurrency`.
#[derive(Clone, Debug)]
pub struct ClosedLoopSource {
    pub concurrency: usize,
    lengths: LengthSampler,
    length_rng: ChaCha8Rng,
    pacing: Option<(Interarrival, ChaCha8Rng)>,
    next_ticket: f64,
    issued: u64,
}

impl ClosedLoopSource {
    pub fn next_template(&mut self, at: SimTime) -> RequestTemplate {
        let (p, d) = self.lengths.sample(&mut self.length_rng);
        self.issued += 1;
        RequestTemplate {
            arrival_offset: at,
            num_prefill_tokens: p,
            num_decode_tokens: d,
        }
    }

    /// Earliest release instant for the next request given a free slot at
    /// `now`, consuming one pacing ticket.
    pub fn release_time(&mut self, now: SimTime) -> SimTime {
        match &mut self.pacing {
            None => now,
            Some((gaps, rng)) => {
                let at = now.max(SimTime::from_secs(self.next_ticket));
                self.next_ticket += gaps.sample(rng);
                at
            }
        }
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }
}

pub fn generate_closed_loop(spec: &WorkloadSpec, rng: &SimRng) -> Result<ClosedLoopSource> {
    let WorkloadMode::ClosedLoop {
        concurrency,
        pacing_qps,
    } = spec.mode
    else {
        return Err(SimError::InvalidWorkload(
            "generate_closed_loop needs mode = closed_loop".into(),
        ));
    };
    if concurrency == 0 {
        return Err(SimError::InvalidWorkload(
            "closed-loop concurrency must be at least 1".into(),
        ));
    }
    let lengths = LengthSampler::new(&spec.lengths, spec.inflation)?;
    let mut pacing = pacing_qps
        .map(|qps| Interarrival::new(qps, spec.interarrival_sigma))
        .transpose()?
        .map(|gaps| (gaps, rng.fork(Substream::Arrivals)));
    let next_ticket = match &mut pacing {
        Some((gaps, r)) => gaps.sample(r),
        None => 0.0,
    };
    Ok(ClosedLoopSource {
        concurrency,
        lengths,
        length_rng: rng.fork(Substream::Lengths),
        pacing,
        next_ticket,
        issued: 0,
    })
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<RequestTemplate>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| SimError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let parse_err = |line: u64, message: String| SimError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>().join(",") != TRACE_HEADER {
        return Err(parse_err(1, format!("expected header `{TRACE_HEADER}`")));
    }
    let mut out: Vec<RequestTemplate> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(parse_err(
                line,
                format!("expected 3 fields, got {}", record.len()),
            ));
        }
        let arrived: f64 = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad arrival time `{}`", &record[0])))?;
        if !arrived.is_finite() || arrived < 0.0 {
            return Err(parse_err(
                line,
                format!("bad arrival time `{}`", &record[0]),
            ));
        }
        let tokens = |i: usize| -> Result<u32> {
            match record[i].trim().parse::<u32>() {
                Ok(n) if n >= 1 => Ok(n),
                _ => Err(parse_err(
                    line,
                    format!("bad token count `{}` in column {}", &record[i], i + 1),
                )),
            }
        };
        let template = RequestTemplate {
            arrival_offset: SimTime::from_secs(arrived),
            num_prefill_tokens: tokens(1)?,
            num_decode_tokens: tokens(2)?,
        };
        if let Some(prev) = out.last() {
            if template.arrival_offset < prev.arrival_offset {
                return Err(parse_err(
                    line,
                    format!(
                        "arrival {} precedes previous arrival {}",
                        arrived,
                        prev.arrival_offset.as_secs()
                    ),
                ));
            }
        }
        out.push(template);
    }
    Ok(out)
}

pub fn save_trace(templates: &[RequestTemplate], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| SimError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| SimError::io(path, e);
    writeln!(w, "{TRACE_HEADER}").map_err(io)?;
    for t in templates {
        writeln!(
            w,
            "{},{},{}",
            t.arrival_offset.as_secs(),
            t.num_prefill_tokens,
            t.num_decode_tokens
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
