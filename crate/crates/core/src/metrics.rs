//! Correlation metrics, score normalization, token accounting and evaluation.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Polarity, QualityRecord};
use crate::error::{Error, Result};
use crate::model::{generate, DecodeConfig, Model, Response, Slot};
use crate::tokenizer::{TokenId, Vocab};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!("length mismatch {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Undefined("need at least two items".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value".into()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample Pearson correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y))
}

/// Four-parameter logistic `b2 + (b1 − b2) / (1 + exp(−(x − b3)/|b4|))`.
pub fn logistic4(p: &[f64; 4], x: f64) -> f64 {
    p[1] + (p[0] - p[1]) / (1.0 + (-(x - p[2]) / p[3].abs().max(1e-12)).exp())
}

/// Fits the logistic map from predictions onto targets with Levenberg–Marquardt.
pub fn fit_logistic(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    check_pair(x, y)?;
    let (ymin, ymax) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let sx = (x.iter().map(|v| (v - mean(x)).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    let mut p = [ymax, ymin, mean(x), sx.max(1e-3)];
    let sse = |p: &[f64; 4]| x.iter().zip(y).map(|(&a, &b)| (logistic4(p, a) - b).powi(2)).sum::<f64>();
    let mut lambda = 1e-3;
    let mut cur = sse(&p);
    for _ in 0..200 {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&a, &b) in x.iter().zip(y) {
            let r = logistic4(&p, a) - b;
            let mut j = [0.0; 4];
            for (k, jk) in j.iter_mut().enumerate() {
                let h = 1e-6 * p[k].abs().max(1e-3);
                let mut q = p;
                q[k] += h;
                *jk = (logistic4(&q, a) - logistic4(&p, a)) / h;
            }
            for r1 in 0..4 {
                jtr[r1] += j[r1] * r;
                for c in 0..4 {
                    jtj[r1][c] += j[r1] * j[c];
                }
            }
        }
        let mut a = jtj;
        for (k, row) in a.iter_mut().enumerate() {
            row[k] *= 1.0 + lambda;
        }
        let Some(step) = solve4(a, jtr) else { break };
        let mut cand = p;
        for k in 0..4 {
            cand[k] -= step[k];
        }
        let next = sse(&cand);
        if next.is_finite() && next < cur {
            let done = (cur - next) < 1e-14 * cur.max(1e-300);
            p = cand;
            cur = next;
            lambda *= 0.3;
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    Ok(p)
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut out = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| a[r][c] * out[c]).sum();
        out[r] = (b[r] - s) / a[r][r];
    }
    Some(out)
}

/// PLCC after fitting the logistic map from predictions to targets.
pub fn plcc_logistic(x: &[f64], y: &[f64]) -> Result<f64> {
    let p = fit_logistic(x, y)?;
    let mapped: Vec<f64> = x.iter().map(|&v| logistic4(&p, v)).collect();
    plcc(&mapped, y)
}

/// Maps one native score onto `[1, 5]` (larger = better). Returns the value
/// and whether it had to be clamped into the native range first.
pub fn normalize_score(value: f64, range: [f64; 2], polarity: Polarity) -> Result<(f64, bool)> {
    let [lo, hi] = range;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidInput(format!("degenerate native range [{lo}, {hi}]")));
    }
    if !value.is_finite() {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    let clamped = value.clamp(lo, hi);
    let mut u = (clamped - lo) / (hi - lo);
    if polarity == Polarity::Dmos {
        u = 1.0 - u;
    }
    Ok((1.0 + 4.0 * u, clamped != value))
}

/// Normalizes a batch; the second value counts clamped entries.
pub fn normalize_mos(values: &[f64], range: [f64; 2], polarity: Polarity) -> Result<(Vec<f64>, usize)> {
    let mut clamped = 0;
    let out = values
        .iter()
        .map(|&v| {
            let (s, c) = normalize_score(v, range, polarity)?;
            clamped += usize::from(c);
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    if clamped > 0 {
        log::warn!("{clamped} scores clamped into [{}, {}]", range[0], range[1]);
    }
    Ok((out, clamped))
}

/// Discrete generated tokens, including segment markers and answer tags but
/// not latent steps or end-of-text.
pub fn count_visible_tokens(response: &Response) -> usize {
    response.visible_tokens()
}

/// Image vs latent-segment attention at the positions that emit the score
/// numeral, renormalized to sum to 1.
pub fn attention_mass(vocab: &Vocab, response: &Response, num_visual: usize) -> Result<(f64, f64)> {
    let attn = response
        .attention
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("response was decoded without attention recording".into()))?;
    let latent_pos: Vec<usize> = response
        .slots
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Slot::Latent))
        .map(|(i, _)| response.prefix_len + i)
        .collect();
    if latent_pos.is_empty() {
        return Ok((1.0, 0.0));
    }
    let (mut img, mut lat, mut count) = (0.0, 0.0, 0);
    for (j, slot) in response.slots.iter().enumerate() {
        let Slot::Token(t) = *slot else { continue };
        if j == 0 || !vocab.is_numeral(t) {
            continue;
        }
        // The numeral at slot j was emitted from the position of slot j-1.
        let Some(row) = attn.get(j - 1) else { continue };
        img += row.iter().take(num_visual).sum::<f64>();
        lat += latent_pos.iter().filter_map(|&p| row.get(p)).sum::<f64>();
        count += 1;
    }
    if count == 0 || img + lat == 0.0 {
        return Err(Error::Undefined("no score numeral with recorded attention".into()));
    }
    Ok((img / (img + lat), lat / (img + lat)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    pub probe_attention: bool,
    pub logistic_plcc: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: DecodeConfig {
                temperature: 0.0,
                ..DecodeConfig::default()
            },
            probe_attention: false,
            logistic_plcc: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: usize,
    pub predicted: Option<f64>,
    pub target: f64,
    pub format_valid: bool,
    pub visible_tokens: usize,
    pub latent_steps: usize,
    pub text: String,
    pub attention: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub plcc: f64,
    pub srcc: f64,
    /// Parsable responses used for the correlations.
    pub n: usize,
    pub n_total: usize,
    pub format_valid_rate: f64,
    pub mean_visible_tokens: f64,
    pub mean_latent_steps: f64,
    pub max_visible_tokens: usize,
    pub max_latent_steps: usize,
    pub per_item: Vec<EvalItem>,
}

impl EvalReport {
    pub const SUMMARY_HEADER: &'static str = "dataset,n,plcc,srcc,mean_visible_tokens,mean_latent_steps";

    pub fn summary_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.4},{:.4}",
            self.dataset, self.n, self.plcc, self.srcc, self.mean_visible_tokens, self.mean_latent_steps
        )
    }

    pub fn write_items_csv(&self, path: &Path) -> Result<()> {
        write_items_csv(path, &self.per_item)
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format!("{}\n{}\n", Self::SUMMARY_HEADER, self.summary_line()))?;
        Ok(())
    }
}

/// One row per record: prediction, target, format and length statistics.
pub fn write_items_csv(path: &Path, items: &[EvalItem]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let probe = items.iter().any(|i| i.attention.is_some());
    write!(f, "id,predicted,target,format_valid,visible_tokens,latent_steps")?;
    if probe {
        write!(f, ",image_share,reasoning_share")?;
    }
    writeln!(f)?;
    for it in items {
        let pred = it.predicted.map_or(String::new(), |p| format!("{p}"));
        write!(
            f,
            "{},{},{:.4},{},{},{}",
            it.id,
            pred,
            it.target,
            u8::from(it.format_valid),
            it.visible_tokens,
            it.latent_steps
        )?;
        if probe {
            match it.attention {
                Some((a, b)) => write!(f, ",{a:.6},{b:.6}")?,
                None => write!(f, ",,")?,
            }
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Decodes one record with the given settings.
pub fn infer_record(
    model: &Model,
    vocab: &Vocab,
    image: &crate::image::Image,
    prompt: &[TokenId],
    decode: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Response> {
    if prompt.is_empty() {
        return Err(Error::InvalidInput("empty prompt".into()));
    }
    let grid = model.encode_image(image)?;
    let visual = model.project_visual(&grid)?;
    Ok(generate(model, vocab, &visual, prompt, decode, rng))
}

/// Decodes every record (greedy by default) without scoring the set.
pub fn decode_records(model: &Model, vocab: &Vocab, records: &[QualityRecord], cfg: &EvalConfig) -> Result<Vec<EvalItem>> {
    let mut decode = cfg.decode.clone();
    decode.record_attention |= cfg.probe_attention;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = Vec::with_capacity(records.len());
    for (id, rec) in records.iter().enumerate() {
        let prompt = vocab.encode(&rec.prompt);
        let resp = infer_record(model, vocab, &rec.image, &prompt, &decode, &mut rng)?;
        let attention = if cfg.probe_attention {
            attention_mass(vocab, &resp, model.config.num_visual_tokens()).ok()
        } else {
            None
        };
        items.push(EvalItem {
            id,
            predicted: resp.parsed_score,
            target: rec.mos,
            format_valid: resp.format_valid,
            visible_tokens: count_visible_tokens(&resp),
            latent_steps: resp.num_latent_steps(),
            text: vocab.render(&resp.tokens),
            attention,
        });
    }
    Ok(items)
}

impl EvalReport {
    /// Correlates parsed scores with targets. Unparsable responses are
    /// excluded from the correlations but count against the format rate.
    pub fn from_items(dataset: &str, items: Vec<EvalItem>, logistic_plcc: bool) -> Result<Self> {
        if items.len() < 2 {
            return Err(Error::Undefined("need at least two records".into()));
        }
        let (pred, target): (Vec<f64>, Vec<f64>) = items
            .iter()
            .filter_map(|i| i.predicted.map(|p| (p, i.target)))
            .unzip();
        if pred.len() < 2 {
            return Err(Error::Undefined(format!("only {} parsable responses", pred.len())));
        }
        let plcc_value = if logistic_plcc {
            plcc_logistic(&pred, &target)?
        } else {
            plcc(&pred, &target)?
        };
        let srcc_value = srcc(&pred, &target)?;
        let n_total = items.len() as f64;
        Ok(EvalReport {
            dataset: dataset.to_string(),
            plcc: plcc_value,
            srcc: srcc_value,
            n: pred.len(),
            n_total: items.len(),
            format_valid_rate: items.iter().filter(|i| i.format_valid).count() as f64 / n_total,
            mean_visible_tokens: items.iter().map(|i| i.visible_tokens as f64).sum::<f64>() / n_total,
            mean_latent_steps: items.iter().map(|i| i.latent_steps as f64).sum::<f64>() / n_total,
            max_visible_tokens: items.iter().map(|i| i.visible_tokens).max().unwrap_or(0),
            max_latent_steps: items.iter().map(|i| i.latent_steps).max().unwrap_or(0),
            per_item: items,
        })
    }
}

/// Decodes every record and builds the report.
pub fn evaluate(model: &Model, vocab: &Vocab, records: &[QualityRecord], dataset: &str, cfg: &EvalConfig) -> Result<EvalReport> {
    if records.len() < 2 {
        return Err(Error::Undefined("need at least two records".into()));
    }
    let items = decode_records(model, vocab, records, cfg)?;
    EvalReport::from_items(dataset, items, cfg.logistic_plcc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        assert!((plcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        let x = [1.0, 2.5, 3.0, 7.0];
        let neg: Vec<f64> = x.iter().map(|v| 7.0 - v).collect();
        assert!((plcc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((plcc(&neg, &x).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(plcc(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Undefined(_))));
    }

    #[test]
    fn spearman_examples() {
        assert!((srcc(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-12);
        let tied = srcc(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((tied - 0.75f64.sqrt()).abs() < 1e-12);
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert!(srcc(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_score(50.0, [0.0, 100.0], Polarity::Mos).unwrap(), (3.0, false));
        assert_eq!(normalize_score(0.0, [0.0, 1.0], Polarity::Dmos).unwrap(), (5.0, false));
        assert_eq!(normalize_score(1400.0, [1000.0, 1800.0], Polarity::Mos).unwrap().0, 3.0);
        assert_eq!(normalize_score(120.0, [0.0, 100.0], Polarity::Mos).unwrap(), (5.0, true));
        let (v, clamped) = normalize_mos(&[0.0, 100.0, -3.0], [0.0, 100.0], Polarity::Dmos).unwrap();
        assert_eq!(v, vec![5.0, 1.0, 5.0]);
        assert_eq!(clamped, 1);
        assert!(normalize_score(1.0, [2.0, 2.0], Polarity::Mos).is_err());
    }

    #[test]
    fn logistic_fit_recovers_a_sigmoid() {
        let truth = [4.5, 1.2, 3.0, 0.7];
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.15).collect();
        let y: Vec<f64> = x.iter().map(|&v| logistic4(&truth, v)).collect();
        let p = fit_logistic(&x, &y).unwrap();
        for &v in &x {
            assert!((logistic4(&p, v) - logistic4(&truth, v)).abs() < 1e-4);
        }
        assert!(plcc_logistic(&x, &y).unwrap() > 0.9999);
    }
}
