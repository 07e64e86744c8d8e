//! Initial node embeddings from taxonomy-aware text prompts.
//!
//! Each node's contextual description is embedded by a pluggable
//! [`EmbeddingProvider`], projected to the model width by a learnable
//! matrix `W_psi` and L2-normalized. Providers are selected by name from
//! [`provider_registry`].

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::params::write_atomic;
use crate::registry::Registry;
use crate::tensor::{Graph, Tensor};

/// Sentence-embedding width used unless configured otherwise.
pub const DEFAULT_EMBED_DIM: usize = 768;

/// Norm below which a projected prompt row cannot be normalized.
pub const NORM_EPS: f64 = 1e-12;

pub const ENV_EMBED_URL: &str = "MAPLE_EMBED_URL";

pub trait EmbeddingProvider: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Width of every returned vector.
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f64>>;

    /// Embeds several texts; remote providers send cache misses in one request.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }

    /// Embedding for node `index` with prompt `text`. Only providers that
    /// ignore the text (random initialization) override this.
    fn embed_node(&self, _index: usize, text: &str) -> Result<Vec<f64>> {
        self.embed(text)
    }

    /// Whether outputs are projected through `W_psi`. Random initialization
    /// draws directly at model width and skips the projection.
    fn projects(&self) -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    /// Embedding width D_psi; for `random` this is the model width.
    pub dim: usize,
    pub endpoint: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
    pub timeout_secs: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
            endpoint: None,
            cache_dir: None,
            seed: 0,
            timeout_secs: 30,
        }
    }
}

pub fn provider_registry() -> Registry<ProviderConfig, dyn EmbeddingProvider> {
    let mut r: Registry<ProviderConfig, dyn EmbeddingProvider> = Registry::new("embedding provider");
    r.register("deterministic_fallback", |c| Ok(Box::new(HashedGaussian::new(c.dim))));
    r.register("random", |c| Ok(Box::new(RandomGaussian::new(c.dim, c.seed))));
    r.register("cached_file", |c| {
        let dir = c
            .cache_dir
            .clone()
            .ok_or_else(|| provider_err("cached_file", "requires a cache directory"))?;
        Ok(Box::new(CachedFile::new(dir, c.dim)))
    });
    r.register("remote", |c| {
        let endpoint = c
            .endpoint
            .clone()
            .or_else(|| std::env::var(ENV_EMBED_URL).ok())
            .ok_or_else(|| provider_err("remote", format!("no endpoint configured (set {ENV_EMBED_URL})")))?;
        Ok(Box::new(Remote::new(
            &endpoint,
            c.cache_dir.clone(),
            c.dim,
            Duration::from_secs(c.timeout_secs),
        )))
    });
    r
}

fn provider_err(provider: &str, reason: impl Into<String>) -> Error {
    Error::Provider {
        provider: provider.to_string(),
        reason: reason.into(),
    }
}

fn check_text(provider: &str, text: &str) -> Result<()> {
    if text.is_empty() {
        return Err(provider_err(provider, "empty text"));
    }
    Ok(())
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn gaussian(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Offline provider: a ChaCha20 stream keyed by SHA-256 of the text gives
/// a unit-norm Gaussian vector.
pub struct HashedGaussian {
    dim: usize,
}

impl HashedGaussian {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl EmbeddingProvider for HashedGaussian {
    fn kind(&self) -> &'static str {
        "deterministic_fallback"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        check_text(self.kind(), text)?;
        let key: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha20Rng::from_seed(key);
        Ok(normalize(gaussian(&mut rng, self.dim)))
    }
}

/// Ignores prompt text: node `i` gets a standard normal vector from stream
/// `i` of the run seed.
pub struct RandomGaussian {
    dim: usize,
    seed: u64,
}

impl RandomGaussian {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl EmbeddingProvider for RandomGaussian {
    fn kind(&self) -> &'static str {
        "random"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.embed_node(0, text)
    }

    fn embed_node(&self, index: usize, _text: &str) -> Result<Vec<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        Ok(gaussian(&mut rng, self.dim))
    }

    fn projects(&self) -> bool {
        false
    }
}

/// On-disk vector cache: `<dir>/<sha256(text)>.f64`, raw little-endian f64.
#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, text: &str) -> PathBuf {
        self.dir.join(format!("{}.f64", text_digest(text)))
    }

    pub fn get(&self, text: &str, dim: usize) -> Result<Option<Vec<f64>>> {
        let path = self.path_for(text);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        if bytes.len() != dim * 8 {
            return Err(Error::Parse(format!(
                "{}: cached embedding has {} bytes, expected {}",
                path.display(),
                bytes.len(),
                dim * 8
            )));
        }
        Ok(Some(
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        ))
    }

    pub fn put(&self, text: &str, v: &[f64]) -> Result<()> {
        let mut bytes = Vec::with_capacity(v.len() * 8);
        for x in v {
            bytes.write_all(&x.to_le_bytes()).expect("vec write");
        }
        write_atomic(&self.path_for(text), &bytes)
    }
}

/// Serves vectors from a pre-filled cache directory; a miss is an error.
pub struct CachedFile {
    cache: EmbeddingCache,
    dim: usize,
}

impl CachedFile {
    pub fn new(dir: impl Into<PathBuf>, dim: usize) -> Self {
        Self {
            cache: EmbeddingCache::new(dir),
            dim,
        }
    }
}

impl EmbeddingProvider for CachedFile {
    fn kind(&self) -> &'static str {
        "cached_file"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        check_text(self.kind(), text)?;
        self.cache
            .get(text, self.dim)?
            .ok_or_else(|| provider_err(self.kind(), format!("no cached vector for '{text}'")))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// HTTP provider: `POST <endpoint>/embed` with `{"texts": [...]}`, expecting
/// `{"embeddings": [[...], ...]}`. Results are cached on disk when a cache
/// directory is configured; cached texts never touch the network.
pub struct Remote {
    url: String,
    cache: Option<EmbeddingCache>,
    dim: usize,
    agent: ureq::Agent,
}

impl Remote {
    pub fn new(endpoint: &str, cache_dir: Option<PathBuf>, dim: usize, timeout: Duration) -> Self {
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/embed") {
            base.to_string()
        } else {
            format!("{base}/embed")
        };
        Self {
            url,
            cache: cache_dir.map(EmbeddingCache::new),
            dim,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    fn fetch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let resp = self
            .agent
            .post(&self.url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| provider_err("remote", format!("POST {}: {e}", self.url)))?;
        let body: EmbedResponse = resp
            .into_json()
            .map_err(|e| provider_err("remote", format!("bad response body: {e}")))?;
        if body.embeddings.len() != texts.len() {
            return Err(provider_err(
                "remote",
                format!("asked for {} embeddings, got {}", texts.len(), body.embeddings.len()),
            ));
        }
        if let Some(bad) = body.embeddings.iter().find(|v| v.len() != self.dim) {
            return Err(provider_err(
                "remote",
                format!("embedding width {} does not match configured {}", bad.len(), self.dim),
            ));
        }
        Ok(body.embeddings)
    }
}

impl EmbeddingProvider for Remote {
    fn kind(&self) -> &'static str {
        "remote"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed_batch(&[text.to_string()])?.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        for t in texts {
            check_text(self.kind(), t)?;
        }
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        if let Some(cache) = &self.cache {
            for (slot, t) in out.iter_mut().zip(texts) {
                *slot = cache.get(t, self.dim)?;
            }
        }
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let query: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            for (&i, v) in missing.iter().zip(self.fetch(&query)?) {
                if let Some(cache) = &self.cache {
                    cache.put(&texts[i], &v)?;
                }
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowProvenance {
    pub node: String,
    pub provider: String,
    pub prompt_sha256: String,
}

/// Raw provider outputs for every node, before projection.
#[derive(Clone, Debug)]
pub struct PromptEmbeddings {
    /// `[M, D_psi]`, one row per node in id order.
    pub psi: Tensor<f64>,
    pub provenance: Vec<RowProvenance>,
    pub projects: bool,
}

pub fn node_prompts(h: &LabelHierarchy) -> Result<Vec<String>> {
    (0..h.len()).map(|id| h.contextual_description(id)).collect()
}

pub fn embed_hierarchy(h: &LabelHierarchy, provider: &dyn EmbeddingProvider) -> Result<PromptEmbeddings> {
    let prompts = node_prompts(h)?;
    let attach = |id: usize, e: Error| match e {
        Error::Provider { provider, reason } => Error::Provider {
            provider,
            reason: format!("node '{}': {reason}", h.nodes()[id].name),
        },
        other => other,
    };
    let rows: Vec<Vec<f64>> = if provider.projects() {
        provider.embed_batch(&prompts).map_err(|e| match e {
            Error::Provider { provider, reason } => Error::Provider {
                provider,
                reason: format!("embedding {} node prompts: {reason}", prompts.len()),
            },
            other => other,
        })?
    } else {
        prompts
            .iter()
            .enumerate()
            .map(|(i, p)| provider.embed_node(i, p).map_err(|e| attach(i, e)))
            .collect::<Result<_>>()?
    };
    let dim = provider.dim();
    for (id, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(attach(
                id,
                provider_err(provider.kind(), format!("returned {} values, expected {dim}", r.len())),
            ));
        }
    }
    let provenance = prompts
        .iter()
        .zip(h.nodes())
        .map(|(p, n)| RowProvenance {
            node: n.name.clone(),
            provider: provider.kind().to_string(),
            prompt_sha256: text_digest(p),
        })
        .collect();
    Ok(PromptEmbeddings {
        psi: Tensor::new(vec![h.len(), dim], rows.concat())?,
        provenance,
        projects: provider.projects(),
    })
}

/// Unit-norm initial node embeddings with per-row provenance.
#[derive(Clone, Debug)]
pub struct InitMatrix {
    /// `[M, d]`
    pub rows: Tensor<f64>,
    pub provenance: Vec<RowProvenance>,
}

/// Row `l` is `normalize(psi_l W_psi)`. Providers that skip the projection
/// yield `normalize(psi_l)` and `w_psi` is ignored.
pub fn init_node_embeddings(
    h: &LabelHierarchy,
    provider: &dyn EmbeddingProvider,
    w_psi: Option<&Tensor<f64>>,
) -> Result<InitMatrix> {
    let emb = embed_hierarchy(h, provider)?;
    let rows = project_rows(&emb, w_psi)?;
    Ok(InitMatrix {
        rows,
        provenance: emb.provenance,
    })
}

/// Applies the projection and normalization outside any training graph.
pub fn project_rows(emb: &PromptEmbeddings, w_psi: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
    let mut g = Graph::<f64>::new(false, 0);
    let psi = g.constant(emb.psi.clone())?;
    let pre = if emb.projects {
        let w = w_psi.ok_or_else(|| Error::InvalidArgument("semantic initialization needs W_psi".into()))?;
        let w = g.constant(w.clone())?;
        g.matmul(psi, w)?
    } else {
        psi
    };
    let out = g.l2_normalize_rows(pre, NORM_EPS)?;
    Ok(g.value(out).clone())
}

/// Writes `psi` rows for `texts` into a cache directory so `cached_file`
/// can serve them later.
pub fn fill_cache(dir: &Path, texts: &[String], provider: &dyn EmbeddingProvider) -> Result<()> {
    let cache = EmbeddingCache::new(dir);
    for (t, v) in texts.iter().zip(provider.embed_batch(texts)?) {
        cache.put(t, &v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::fixtures;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn fallback_is_pure_and_spread_out() {
        let p = HashedGaussian::new(768);
        let a = p.embed("The category 'ship'").unwrap();
        let b = p.embed("The category 'ship'").unwrap();
        assert_eq!(a.len(), 768);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        // |cos| of independent unit vectors has sd 1/sqrt(768) ~ 0.036;
        // 0.2 is > 5 sd.
        for i in 0..100 {
            let x = p.embed(&format!("prompt {i} left")).unwrap();
            let y = p.embed(&format!("prompt {i} right")).unwrap();
            assert!(cosine(&x, &y).abs() < 0.2);
        }
        assert!(p.embed("").is_err());
    }

    #[test]
    fn semantic_rows_are_unit_norm() {
        let h = fixtures::aid();
        let provider = HashedGaussian::new(96);
        let w = crate::tensor::Tensor::from_f64(
            vec![96, 16],
            &(0..96 * 16).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let init = init_node_embeddings(&h, &provider, Some(&w)).unwrap();
        assert_eq!(init.rows.shape(), &[35, 16]);
        for i in 0..35 {
            let n = init.rows.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(init.provenance[0].provider, "deterministic_fallback");
    }

    #[test]
    fn zero_projection_cannot_be_normalized() {
        let h = fixtures::aid_ship_branch();
        let provider = HashedGaussian::new(8);
        let w = Tensor::zeros(&[8, 4]);
        assert!(init_node_embeddings(&h, &provider, Some(&w)).is_err());
    }

    #[test]
    fn random_provider_gives_normalized_gaussians() {
        let h = fixtures::aid_ship_branch();
        let provider = RandomGaussian::new(12, 7);
        let init = init_node_embeddings(&h, &provider, None).unwrap();
        for i in 0..h.len() {
            let raw = normalize(provider.embed_node(i, "ignored").unwrap());
            assert_eq!(init.rows.row(i), raw.as_slice());
        }
        assert_ne!(init.rows.row(0), init.rows.row(1));
        // independent of prompt text
        assert_eq!(provider.embed_node(3, "a").unwrap(), provider.embed_node(3, "b").unwrap());
    }

    #[test]
    fn registry_names_and_errors() {
        let r = provider_registry();
        assert_eq!(r.names(), vec!["cached_file", "deterministic_fallback", "random", "remote"]);
        let cfg = ProviderConfig { dim: 4, ..Default::default() };
        assert_eq!(r.build("deterministic_fallback", &cfg).unwrap().dim(), 4);
        assert!(r.build("cached_file", &cfg).is_err());
        assert!(matches!(r.build("word2vec", &cfg), Err(Error::UnknownStrategy { .. })));
    }

    /// Minimal HTTP/1.1 stub answering POST /embed with fallback vectors.
    fn stub_server(dim: usize, hits: Arc<AtomicUsize>) -> (String, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            assert!(line.starts_with("POST /embed "), "{line}");
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            let fb = HashedGaussian::new(dim);
            let embs: Vec<Vec<f64>> = req["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| fb.embed(t.as_str().unwrap()).unwrap())
                .collect();
            let out = serde_json::json!({ "embeddings": embs }).to_string();
            let mut s = stream;
            write!(s, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}", out.len()).unwrap();
            hits.fetch_add(1, Ordering::SeqCst);
        });
        (url, handle)
    }

    #[test]
    fn remote_fills_cache_then_serves_offline() {
        let dir = tempfile::tempdir().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let (url, handle) = stub_server(16, hits.clone());
        let texts = vec!["alpha".to_string(), "beta".to_string()];
        let remote = Remote::new(&url, Some(dir.path().to_path_buf()), 16, Duration::from_secs(5));
        let first = remote.embed_batch(&texts).unwrap();
        handle.join().unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        assert_eq!(first[0], HashedGaussian::new(16).embed("alpha").unwrap());

        // endpoint is gone; warm cache answers
        let again = remote.embed_batch(&texts).unwrap();
        assert_eq!(first, again);
        let offline = CachedFile::new(dir.path(), 16);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&offline.embed("beta").unwrap()), bits(&first[1]));

        // cold cache and no server
        let err = remote.embed("gamma").unwrap_err();
        assert!(matches!(err, Error::Provider { .. }), "{err}");
    }
}
