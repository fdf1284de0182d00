//! Backend construction from short textual specs, as taken on the command
//! line: `scripted:<path>` or `http:<model>` for chat, `fixture:<path>`,
//! `http` or `none` for search.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{
    BackendError, Backends, CachedChat, ChatBackend, FixtureSearch, HttpChat, HttpSearch, NullSearch, ResponseCache,
    ScriptedChat, SearchBackend,
};

/// `media_root` only matters to `http:` backends with `multimodal` set.
pub fn chat_from_spec(spec: &str, media_root: &Path, multimodal: bool) -> Result<Arc<dyn ChatBackend>, BackendError> {
    match spec.split_once(':') {
        Some(("scripted", path)) => Ok(Arc::new(ScriptedChat::from_file(Path::new(path))?)),
        Some(("http", model)) if !model.is_empty() => Ok(Arc::new(
            HttpChat::from_env(model)
                .multimodal(multimodal)
                .with_media_root(media_root),
        )),
        _ => Err(BackendError::UnknownSpec(format!(
            "chat backend `{spec}` (expected scripted:<path> or http:<model>)"
        ))),
    }
}

pub fn search_from_spec(spec: &str) -> Result<Arc<dyn SearchBackend>, BackendError> {
    match spec.split_once(':') {
        Some(("fixture", path)) => Ok(Arc::new(FixtureSearch::from_file(Path::new(path))?)),
        None if spec == "http" => Ok(Arc::new(HttpSearch::from_env())),
        None if spec == "none" => Ok(Arc::new(NullSearch)),
        _ => Err(BackendError::UnknownSpec(format!(
            "search backend `{spec}` (expected fixture:<path>, http or none)"
        ))),
    }
}

/// Everything needed to assemble [`Backends`] for a run.
#[derive(Debug, Clone)]
pub struct BackendSpecs {
    pub chat: String,
    /// Serves media calls. Defaults to `chat`, with media enabled for `http:`.
    pub multimodal: Option<String>,
    pub search: String,
    /// Wraps the chat backends in a [`CachedChat`] when set.
    pub cache_dir: Option<PathBuf>,
    pub media_root: PathBuf,
}

impl BackendSpecs {
    pub fn new(chat: impl Into<String>) -> Self {
        Self {
            chat: chat.into(),
            multimodal: None,
            search: "none".into(),
            cache_dir: None,
            media_root: PathBuf::from("."),
        }
    }

    pub fn build(&self) -> Result<Backends, BackendError> {
        let root = &self.media_root;
        let chat = chat_from_spec(&self.chat, root, false)?;
        let multimodal = match &self.multimodal {
            Some(spec) => chat_from_spec(spec, root, true)?,
            None if self.chat.starts_with("http:") => chat_from_spec(&self.chat, root, true)?,
            None => chat.clone(),
        };
        let (chat, multimodal) = match &self.cache_dir {
            Some(dir) => {
                let wrap = |b: Arc<dyn ChatBackend>| -> Result<Arc<dyn ChatBackend>, BackendError> {
                    Ok(Arc::new(CachedChat::new(b, ResponseCache::open(dir)?)))
                };
                let same = Arc::ptr_eq(&chat, &multimodal);
                let chat = wrap(chat)?;
                let multimodal = if same { chat.clone() } else { wrap(multimodal)? };
                (chat, multimodal)
            }
            None => (chat, multimodal),
        };
        Ok(Backends::new(chat, search_from_spec(&self.search)?)
            .with_multimodal(multimodal)
            .with_media_root(root))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_specs_are_rejected() {
        assert!(matches!(chat_from_spec("pigeon", Path::new("."), false), Err(BackendError::UnknownSpec(_))));
        assert!(matches!(chat_from_spec("http:", Path::new("."), false), Err(BackendError::UnknownSpec(_))));
        assert!(matches!(search_from_spec("bing"), Err(BackendError::UnknownSpec(_))));
    }

    #[test]
    fn http_chat_gets_a_media_twin() {
        let b = BackendSpecs::new("http:m").build().unwrap();
        assert_eq!(b.chat.id(), "http:m");
        assert_eq!(b.multimodal.id(), "http:m+media");
        assert_eq!(b.search.id(), NullSearch.id());
    }

    #[test]
    fn cached_backends_share_one_wrapper() {
        let tmp = tempfile::tempdir().unwrap();
        let script = tmp.path().join("s.json");
        std::fs::write(&script, "[]").unwrap();
        let mut specs = BackendSpecs::new(format!("scripted:{}", script.display()));
        specs.cache_dir = Some(tmp.path().join("cache"));
        let b = specs.build().unwrap();
        assert!(Arc::ptr_eq(&b.chat, &b.multimodal));
    }
}
