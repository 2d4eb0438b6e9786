//! Helpers shared by the integration tests: an independent scoring and
//! metric oracle, call-counting service stubs and a one-shot HTTP server.
#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use zsre_core::corpus::{self, Dataset};
use zsre_core::embedding::{self, EncoderProvider, Pooling};
use zsre_core::sideinfo::{self, ChatClient, ChatError, ChatRequest, GenerationConfig, PromptSet, SideInfoStore};
use zsre_core::synthetic;

/// Plain re-implementation of the scoring rules, written without the library.
pub mod oracle {
    use std::collections::BTreeMap;

    pub const MODES: [&str; 5] = ["desc_only", "desc_hypernym", "desc_type", "desc_hyp_type", "full_weighted"];

    pub fn cos(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        let c = dot / (na.sqrt() * nb.sqrt());
        c.max(-1.0).min(1.0)
    }

    /// The eight texts embedded for a pair: a..g and context.
    pub fn texts(head: (&str, &str, &str), tail: (&str, &str, &str), verbatim: bool) -> Vec<String> {
        let (ht, hd, hh) = head;
        let (tt, td, th) = tail;
        let tail_role = if verbatim { "a subject" } else { "an object" };
        vec![
            "Head entity: ".to_string() + hd + " Tail entity: " + td,
            hh.to_string(),
            th.to_string(),
            ht.to_string(),
            tt.to_string(),
            ht.to_string() + " acting as a subject, described as " + hh,
            tt.to_string() + " acting as " + tail_role + ", described as " + th,
            "Relation between ".to_string() + hh + " and " + th,
        ]
    }

    pub fn label_text(label: &str) -> String {
        label.replace('_', " ").trim().to_lowercase()
    }

    /// [desc, head_hyp, tail_hyp, head_type, tail_type, role, context]
    pub fn components(v: &[Vec<f64>], label: &[f64]) -> [f64; 7] {
        [
            cos(&v[0], label),
            cos(&v[1], label),
            cos(&v[2], label),
            cos(&v[3], label),
            cos(&v[4], label),
            (cos(&v[5], label) + cos(&v[6], label)) / 2.0,
            cos(&v[7], label),
        ]
    }

    pub fn confidence(c: &[f64; 7]) -> f64 {
        let n = c.len() as f64;
        let mean = c.iter().sum::<f64>() / n;
        let var = c.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let conf = (mean + (1.0 - var.sqrt())) / 2.0;
        conf.max(0.0).min(1.0)
    }

    pub fn final_score(c: &[f64; 7], w: &[f64; 7]) -> f64 {
        let mut s = 0.0;
        for i in 0..7 {
            s += w[i] * c[i];
        }
        s * confidence(c)
    }

    pub fn mode_score(mode: &str, c: &[f64; 7], w: &[f64; 7]) -> f64 {
        let mean = |idx: &[usize]| idx.iter().map(|&i| c[i]).sum::<f64>() / idx.len() as f64;
        match mode {
            "desc_only" => c[0],
            "desc_hypernym" => mean(&[0, 1, 2]),
            "desc_type" => mean(&[0, 3, 4]),
            "desc_hyp_type" => mean(&[0, 1, 2, 3, 4]),
            "full_weighted" => final_score(c, w),
            other => panic!("unknown mode {other}"),
        }
    }

    /// Index of the best score; later entries must beat the best by more than 1e-9.
    pub fn argmax(scores: &[f64]) -> usize {
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] + 1e-9 {
                best = i;
            }
        }
        best
    }

    /// Macro F1 from a full confusion matrix; labels without gold or
    /// predicted instances score 0.
    pub fn macro_f1(gold: &[&str], pred: &[&str], labels: &[&str]) -> f64 {
        let idx: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
        let k = labels.len();
        let mut m = vec![vec![0usize; k]; k];
        for (g, p) in gold.iter().zip(pred) {
            m[idx[g]][idx[p]] += 1;
        }
        let mut total = 0.0;
        for i in 0..k {
            let tp = m[i][i] as f64;
            let row: usize = m[i].iter().sum();
            let col: usize = (0..k).map(|r| m[r][i]).sum();
            let p = if col == 0 { 0.0 } else { tp / col as f64 };
            let r = if row == 0 { 0.0 } else { tp / row as f64 };
            total += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        }
        total / k as f64
    }

    pub fn population_variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    }
}

pub struct CountingEncoder {
    inner: Arc<dyn EncoderProvider>,
    pub calls: AtomicUsize,
    pub texts: AtomicUsize,
}

impl CountingEncoder {
    pub fn new(inner: Arc<dyn EncoderProvider>) -> Arc<Self> {
        Arc::new(Self {
            inner,
            calls: AtomicUsize::new(0),
            texts: AtomicUsize::new(0),
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl EncoderProvider for CountingEncoder {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn pooling(&self) -> Pooling {
        self.inner.pooling()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn encode(&self, texts: &[String]) -> embedding::Result<Vec<Vec<f64>>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.texts.fetch_add(texts.len(), Ordering::SeqCst);
        self.inner.encode(texts)
    }
}

pub struct CountingChat {
    inner: Arc<dyn ChatClient>,
    pub calls: AtomicUsize,
}

impl CountingChat {
    pub fn new(inner: Arc<dyn ChatClient>) -> Arc<Self> {
        Arc::new(Self {
            inner,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatClient for CountingChat {
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

/// Synthetic corpus with its side information already generated.
pub fn synthetic_with_store() -> (Dataset, SideInfoStore) {
    let c = synthetic::corpus();
    let client = synthetic::ScriptedChatClient::new(c.script);
    let mut store = SideInfoStore::in_memory();
    sideinfo::build_side_info(&c.dataset, &client, &GenerationConfig::default(), &PromptSet::default(), &mut store)
        .expect("scripted side info");
    (c.dataset, store)
}

/// Writes the synthetic corpus as DocRED JSON and returns its path.
pub fn write_synthetic_dataset(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("dataset.json");
    let json = corpus::to_docred_json(&synthetic::corpus().dataset);
    std::fs::write(&path, serde_json::to_vec_pretty(&json).unwrap()).unwrap();
    path
}

pub fn scripted_chat() -> Arc<dyn ChatClient> {
    Arc::new(synthetic::ScriptedChatClient::new(synthetic::corpus().script))
}

#[derive(Debug, Clone)]
pub struct CapturedRequest {
    pub method: String,
    pub path: String,
    pub headers: HashMap<String, String>,
    pub body: String,
}

/// Serves the canned `(status, body)` replies in order, one per connection,
/// and records every request.
pub fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<CapturedRequest>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut parts = line.split_whitespace();
            let method = parts.next().unwrap_or_default().to_string();
            let path = parts.next().unwrap_or_default().to_string();
            let mut headers = HashMap::new();
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                if let Some((k, v)) = h.split_once(':') {
                    headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
                }
            }
            let len: usize = headers.get("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(CapturedRequest {
                method,
                path,
                headers,
                body: String::from_utf8(buf).unwrap(),
            });
            let mut stream = stream;
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
            stream.flush().unwrap();
        }
    });
    (url, seen, handle)
}
