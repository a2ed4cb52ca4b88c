//! ARPA text format. Stored values are log10 per the format convention;
//! in-memory scores are natural logs, converted at the boundary.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::Error;
use crate::ngram::kn::Entry;
use crate::ngram::NGramModel;
use crate::vocab::{TokenId, BOS_SYMBOL, EOS_SYMBOL, UNK_SYMBOL};
use crate::Result;

const LN10: f64 = std::f64::consts::LN_10;

pub fn write_arpa(model: &NGramModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_arpa_to(model, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_arpa_to(model: &NGramModel, w: &mut impl Write) -> Result<()> {
    writeln!(w, "\\data\\")?;
    for n in 1..=model.order {
        writeln!(w, "ngram {n}={}", model.entries[n - 1].len())?;
    }
    for n in 1..=model.order {
        writeln!(w)?;
        writeln!(w, "\\{n}-grams:")?;
        let mut grams: Vec<(&Vec<TokenId>, &Entry)> = model.entries[n - 1].iter().collect();
        grams.sort_by(|a, b| a.0.cmp(b.0));
        for (gram, entry) in grams {
            let words: Vec<&str> = gram
                .iter()
                .map(|&t| model.symbols[t].as_str())
                .collect();
            let logp10 = entry.logp / LN10;
            if entry.backoff != 0.0 && n < model.order {
                writeln!(
                    w,
                    "{:.7}\t{}\t{:.7}",
                    logp10,
                    words.join(" "),
                    entry.backoff / LN10
                )?;
            } else {
                writeln!(w, "{:.7}\t{}", logp10, words.join(" "))?;
            }
        }
    }
    writeln!(w)?;
    writeln!(w, "\\end\\")?;
    Ok(())
}

pub fn read_arpa(path: &Path) -> Result<NGramModel> {
    let r = BufReader::new(File::open(path)?);
    read_arpa_from(r)
}

fn read_arpa_from(r: impl BufRead) -> Result<NGramModel> {
    let mut lines = r.lines().enumerate();

    // locate \data\
    let mut found_data = false;
    for (idx, line) in lines.by_ref() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if t == "\\data\\" {
            found_data = true;
            break;
        }
        return Err(Error::parse(idx + 1, format!("expected \\data\\, got {t:?}")));
    }
    if !found_data {
        return Err(Error::parse(0, "missing \\data\\ section"));
    }

    // header counts
    let mut declared: Vec<usize> = Vec::new();
    let mut pending: Option<(usize, String)> = None;
    for (idx, line) in lines.by_ref() {
        let line = line?;
        let t = line.trim().to_string();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix("ngram ") {
            let (n, count) = rest
                .split_once('=')
                .ok_or_else(|| Error::parse(idx + 1, format!("bad ngram header {t:?}")))?;
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::parse(idx + 1, format!("non-numeric order {n:?}")))?;
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| Error::parse(idx + 1, format!("non-numeric count {count:?}")))?;
            if n != declared.len() + 1 {
                return Err(Error::parse(idx + 1, format!("out-of-order header for {n}-grams")));
            }
            declared.push(count);
        } else {
            pending = Some((idx, t));
            break;
        }
    }
    if declared.is_empty() {
        return Err(Error::parse(0, "\\data\\ section declares no ngram orders"));
    }
    let order = declared.len();

    let mut symbols: Vec<String> = Vec::new();
    let mut index: HashMap<String, TokenId> = HashMap::new();
    let mut entries: Vec<HashMap<Vec<TokenId>, Entry>> = vec![HashMap::new(); order];
    let mut saw_end = false;

    let mut current: Option<usize> = None;
    loop {
        let (idx, t) = match pending.take() {
            Some(p) => p,
            None => match lines.next() {
                Some((idx, line)) => (idx, line?.trim().to_string()),
                None => break,
            },
        };
        if t.is_empty() {
            continue;
        }
        if t == "\\end\\" {
            saw_end = true;
            break;
        }
        if let Some(rest) = t.strip_prefix('\\') {
            let n: usize = rest
                .strip_suffix("-grams:")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(idx + 1, format!("unexpected section marker {t:?}")))?;
            if n < 1 || n > order {
                return Err(Error::parse(
                    idx + 1,
                    format!("section \\{n}-grams: not declared in \\data\\"),
                ));
            }
            current = Some(n);
            continue;
        }
        let n = current
            .ok_or_else(|| Error::parse(idx + 1, "entry before any \\N-grams: section"))?;
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != n + 1 && fields.len() != n + 2 {
            return Err(Error::parse(
                idx + 1,
                format!("expected {} or {} fields for a {n}-gram, got {}", n + 1, n + 2, fields.len()),
            ));
        }
        let logp10: f64 = fields[0]
            .parse()
            .map_err(|_| Error::parse(idx + 1, format!("non-numeric log-prob {:?}", fields[0])))?;
        let backoff10: f64 = if fields.len() == n + 2 {
            fields[n + 1].parse().map_err(|_| {
                Error::parse(idx + 1, format!("non-numeric backoff {:?}", fields[n + 1]))
            })?
        } else {
            0.0
        };
        let mut gram = Vec::with_capacity(n);
        for word in &fields[1..=n] {
            let id = *index.entry((*word).to_string()).or_insert_with(|| {
                symbols.push((*word).to_string());
                symbols.len() - 1
            });
            gram.push(id);
        }
        entries[n - 1].insert(
            gram,
            Entry {
                logp: logp10 * LN10,
                backoff: backoff10 * LN10,
            },
        );
    }

    if !saw_end {
        return Err(Error::parse(0, "missing \\end\\ section"));
    }
    for n in 1..=order {
        if entries[n - 1].len() != declared[n - 1] {
            return Err(Error::parse(
                0,
                format!(
                    "\\data\\ declares {} {n}-grams but {} were read",
                    declared[n - 1],
                    entries[n - 1].len()
                ),
            ));
        }
    }

    let bos = index
        .get(BOS_SYMBOL)
        .copied()
        .ok_or_else(|| Error::input(format!("ARPA model lacks a {BOS_SYMBOL} unigram")))?;
    let eos = index
        .get(EOS_SYMBOL)
        .copied()
        .ok_or_else(|| Error::input(format!("ARPA model lacks a {EOS_SYMBOL} unigram")))?;
    let unk = index.get(UNK_SYMBOL).copied();

    Ok(NGramModel {
        order,
        symbols,
        bos,
        eos,
        unk,
        entries,
        discount_fallback_orders: Vec::new(),
    })
}
