use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::Gram;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    PrecomputedFile,
    HttpEndpoint,
    OfflineFallback,
}

/// Maps grams to vectors. Implementations must be deterministic: the same
/// gram always yields the same vector from one provider instance.
pub trait EmbeddingProvider: Sync {
    fn kind(&self) -> ProviderKind;
    /// Expected vector length, when known up front.
    fn dimension(&self) -> Option<usize>;
    fn embed(&self, grams: &[Gram]) -> Result<Vec<Vec<f64>>>;
}

/// Embeds `grams` and L2-normalises each vector.
pub fn embed_grams(grams: &[Gram], provider: &dyn EmbeddingProvider) -> Result<Vec<Vec<f64>>> {
    if grams.is_empty() {
        return Err(Error::Miner("no grams to embed".into()));
    }
    let raw = provider.embed(grams)?;
    if raw.len() != grams.len() {
        return Err(Error::Endpoint(format!(
            "provider returned {} vectors for {} grams",
            raw.len(),
            grams.len()
        )));
    }
    let dim = provider.dimension().unwrap_or(raw[0].len());
    raw.into_iter()
        .zip(grams)
        .map(|(v, g)| {
            if v.len() != dim {
                return Err(Error::Miner(format!(
                    "dimension mismatch for '{}': expected {dim}, got {}",
                    g.surface,
                    v.len()
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::Miner(format!(
                    "embedding for '{}' has zero or non-finite norm",
                    g.surface
                )));
            }
            Ok(v.into_iter().map(|x| x / norm).collect())
        })
        .collect()
}

pub const FALLBACK_DIMENSION: usize = 64;
/// Hash seed of the offline embedder ("SGMINE" in ASCII).
pub const FALLBACK_SEED: u64 = 0x5347_4D49_4E45;

/// Offline embedder: signed feature hashing of character trigrams.
///
/// The surface is padded with `^` and `$` so one- and two-letter grams still
/// produce trigrams. Each trigram adds ±1 to one coordinate; index and sign
/// come from a seeded FNV-1a hash with a splitmix finaliser.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dimension: usize,
    pub seed: u64,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder {
            dimension: FALLBACK_DIMENSION,
            seed: FALLBACK_SEED,
        }
    }
}

impl HashingEmbedder {
    fn hash(&self, bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // splitmix64 finaliser
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^ (h >> 31)
    }

    pub fn embed_one(&self, surface: &str) -> Vec<f64> {
        let padded: Vec<char> = std::iter::once('^')
            .chain(surface.chars())
            .chain(std::iter::once('$'))
            .collect();
        let mut v = vec![0.0; self.dimension];
        let mut buf = String::new();
        for w in padded.windows(3) {
            buf.clear();
            buf.extend(w);
            let h = self.hash(buf.as_bytes());
            let idx = (h % self.dimension as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[idx] += sign;
        }
        if v.iter().all(|x| *x == 0.0) {
            // Every trigram cancelled out; fall back to the hash of the
            // whole surface so the vector is still deterministic.
            let h = self.hash(surface.as_bytes());
            v[(h % self.dimension as u64) as usize] = 1.0;
        }
        v
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::OfflineFallback
    }

    fn dimension(&self) -> Option<usize> {
        Some(self.dimension)
    }

    fn embed(&self, grams: &[Gram]) -> Result<Vec<Vec<f64>>> {
        Ok(grams.iter().map(|g| self.embed_one(&g.surface)).collect())
    }
}

/// Vectors read from a JSON object mapping gram surface to embedding.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbeddings {
    vectors: HashMap<String, Vec<f64>>,
    dimension: usize,
}

impl PrecomputedEmbeddings {
    pub fn new(vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        let dimension = vectors.values().next().map(Vec::len).unwrap_or(0);
        if dimension == 0 {
            return Err(Error::Miner("precomputed embeddings are empty".into()));
        }
        if let Some((k, v)) = vectors.iter().find(|(_, v)| v.len() != dimension) {
            return Err(Error::Miner(format!(
                "dimension mismatch for '{k}': expected {dimension}, got {}",
                v.len()
            )));
        }
        let vectors = vectors
            .into_iter()
            .map(|(k, v)| (crate::text::normalize(&k), v))
            .collect();
        Ok(PrecomputedEmbeddings { vectors, dimension })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: HashMap<String, Vec<f64>> = serde_json::from_str(&s)
            .map_err(|e| Error::json("sg-miner: precomputed embeddings", e))?;
        Self::new(map)
    }
}

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn kind(&self) -> ProviderKind {
        ProviderKind::PrecomputedFile
    }

    fn dimension(&self) -> Option<usize> {
        Some(self.dimension)
    }

    fn embed(&self, grams: &[Gram]) -> Result<Vec<Vec<f64>>> {
        grams
            .iter()
            .map(|g| {
                self.vectors
                    .get(&g.surface)
                    .cloned()
                    .ok_or_else(|| Error::EmbeddingMissing(g.surface.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct HttpEmbedderConfig {
    pub url: String,
    pub model: Option<String>,
    pub token: Option<String>,
    pub dimension: Option<usize>,
    pub batch_size: usize,
    pub timeout: Duration,
}

impl HttpEmbedderConfig {
    pub fn new(url: impl Into<String>) -> Self {
        HttpEmbedderConfig {
            url: url.into(),
            model: None,
            token: None,
            dimension: None,
            batch_size: 256,
            timeout: Duration::from_secs(60),
        }
    }
}

/// Client for an embeddings endpoint that accepts `{"input": [...]}` and
/// answers `{"data": [{"embedding": [...]}, ...]}` in input order.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [&'a str],
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        HttpEmbedder { config, agent }
    }

    fn request(&self, batch: &[&str]) -> Result<Vec<Vec<f64>>> {
        let body = EmbedRequest {
            input: batch,
            model: self.config.model.as_deref(),
        };
        let mut req = self.agent.post(&self.config.url);
        if let Some(token) = &self.config.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Error::Endpoint(format!("{}: {e}", self.config.url)))?;
        let parsed: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Endpoint(format!("malformed response: {e}")))?;
        if parsed.data.len() != batch.len() {
            return Err(Error::Endpoint(format!(
                "malformed response: {} embeddings for {} inputs",
                parsed.data.len(),
                batch.len()
            )));
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::HttpEndpoint
    }

    fn dimension(&self) -> Option<usize> {
        self.config.dimension
    }

    fn embed(&self, grams: &[Gram]) -> Result<Vec<Vec<f64>>> {
        let surfaces: Vec<&str> = grams.iter().map(|g| g.surface.as_str()).collect();
        let mut out = Vec::with_capacity(grams.len());
        for batch in surfaces.chunks(self.config.batch_size.max(1)) {
            out.extend(self.request(batch)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sg::cosine;

    fn g(s: &str) -> Gram {
        Gram::parse(s).unwrap()
    }

    #[test]
    fn fallback_is_deterministic_and_unit_norm() {
        let e = HashingEmbedder::default();
        let v = embed_grams(&[g("wait"), g("wait"), g("therefore")], &e).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[0].len(), FALLBACK_DIMENSION);
        for x in &v {
            let n: f64 = x.iter().map(|a| a * a).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(cosine(&v[0], &v[2]) < 1.0);
    }

    #[test]
    fn precomputed_missing_gram() {
        let p = PrecomputedEmbeddings::new(HashMap::from([("so".to_string(), vec![1.0, 0.0])]))
            .unwrap();
        let err = embed_grams(&[g("so"), g("wait")], &p).unwrap_err();
        assert_eq!(err.to_string(), "sg-miner: embedding missing for gram 'wait'");
    }

    #[test]
    fn precomputed_dimension_mismatch() {
        let r = PrecomputedEmbeddings::new(HashMap::from([
            ("so".to_string(), vec![1.0, 0.0]),
            ("now".to_string(), vec![1.0]),
        ]));
        assert!(r.is_err());
    }
}
