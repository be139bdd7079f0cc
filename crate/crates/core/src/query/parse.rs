use crate::model::{fold_label, Bucket, EntityKind, EntityRef, QueryAst, TimeRange, Timestamp};
use crate::query::QueryError;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Eq,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    pos: usize,
}

fn syntax(position: usize, expected: impl Into<String>) -> QueryError {
    QueryError::Syntax {
        position,
        expected: expected.into(),
    }
}

fn lex(text: &str) -> Result<Vec<Token>, QueryError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b'=' {
            out.push(Token { tok: Tok::Eq, pos: i });
            i += 1;
        } else if c == b'"' {
            let start = i;
            i += 1;
            let mut s = String::new();
            loop {
                match text[i..].chars().next() {
                    None => return Err(syntax(text.len(), "closing quote")),
                    Some('"') => {
                        i += 1;
                        break;
                    }
                    Some('\\') => {
                        let next = text[i + 1..].chars().next();
                        match next {
                            Some(e @ ('"' | '\\')) => {
                                s.push(e);
                                i += 2;
                            }
                            _ => return Err(syntax(i, "escape \\\" or \\\\")),
                        }
                    }
                    Some(ch) => {
                        s.push(ch);
                        i += ch.len_utf8();
                    }
                }
            }
            out.push(Token {
                tok: Tok::Str(s),
                pos: start,
            });
        } else {
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'=' && bytes[i] != b'"' {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Word(text[start..i].to_owned()),
                pos: start,
            });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    at: usize,
    end: usize,
}

impl Parser {
    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.end, |t| t.pos)
    }

    fn peek_word(&self) -> Option<&str> {
        match self.toks.get(self.at) {
            Some(Token { tok: Tok::Word(w), .. }) => Some(w),
            _ => None,
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), QueryError> {
        if self.peek_word() == Some(kw) {
            self.at += 1;
            Ok(())
        } else {
            Err(syntax(self.pos(), kw))
        }
    }

    fn eq(&mut self) -> Result<(), QueryError> {
        match self.toks.get(self.at) {
            Some(Token { tok: Tok::Eq, .. }) => {
                self.at += 1;
                Ok(())
            }
            _ => Err(syntax(self.pos(), "=")),
        }
    }

    fn string(&mut self) -> Result<(String, usize), QueryError> {
        match self.toks.get(self.at) {
            Some(Token { tok: Tok::Str(s), pos }) => {
                let r = (s.clone(), *pos);
                self.at += 1;
                Ok(r)
            }
            _ => Err(syntax(self.pos(), "quoted string")),
        }
    }

    fn label(&mut self) -> Result<String, QueryError> {
        let (s, _) = self.string()?;
        let folded = fold_label(&s);
        if folded.is_empty() {
            return Err(QueryError::Semantic {
                reason: "label must not be empty".into(),
            });
        }
        Ok(folded)
    }

    fn entity(&mut self) -> Result<EntityRef, QueryError> {
        let kind = match self.peek_word() {
            Some("object") => EntityKind::Object,
            Some("person") => EntityKind::Person,
            _ => return Err(syntax(self.pos(), "object or person")),
        };
        self.at += 1;
        self.eq()?;
        let label = self.label()?;
        Ok(EntityRef { kind, label })
    }

    fn field(&mut self, name: &str) -> Result<String, QueryError> {
        self.keyword(name)?;
        self.eq()?;
        self.label()
    }

    fn timestamp(&mut self) -> Result<Timestamp, QueryError> {
        let pos = self.pos();
        match self.peek_word() {
            Some(w) => match Timestamp::parse(w) {
                Ok(ts) => {
                    self.at += 1;
                    Ok(ts)
                }
                Err(_) => Err(syntax(pos, "ISO-8601 timestamp")),
            },
            None => Err(syntax(pos, "ISO-8601 timestamp")),
        }
    }

    fn range(&mut self) -> Result<TimeRange, QueryError> {
        self.keyword("FROM")?;
        let from = self.timestamp()?;
        self.keyword("TO")?;
        let to = self.timestamp()?;
        TimeRange::new(from, to).ok_or_else(|| QueryError::Semantic {
            reason: format!("range start {from} is after its end {to}"),
        })
    }

    /// `act [subj] range`
    fn activity_args(&mut self) -> Result<(String, Option<String>, TimeRange), QueryError> {
        let activity = self.field("activity")?;
        let subject = if self.peek_word() == Some("subject") {
            Some(self.field("subject")?)
        } else {
            None
        };
        let range = self.range()?;
        Ok((activity, subject, range))
    }

    fn query(&mut self) -> Result<QueryAst, QueryError> {
        let head = self.peek_word().map(str::to_owned);
        let expected = "LAST_SEEN, PRESENT, DID, DURATION or WHERE_MOST";
        let ast = match head.as_deref() {
            Some("LAST_SEEN") => {
                self.at += 1;
                QueryAst::LastSeen { entity: self.entity()? }
            }
            Some("PRESENT") => {
                self.at += 1;
                let entity = self.entity()?;
                let range = self.range()?;
                QueryAst::Present { entity, range }
            }
            Some("DID") => {
                self.at += 1;
                let (activity, subject, range) = self.activity_args()?;
                QueryAst::Did {
                    activity,
                    subject,
                    range,
                }
            }
            Some("DURATION") => {
                self.at += 1;
                let (activity, subject, range) = self.activity_args()?;
                let bucket = if self.peek_word() == Some("BY") {
                    self.at += 1;
                    let b = match self.peek_word() {
                        Some("hour") => Bucket::Hour,
                        Some("day") => Bucket::Day,
                        _ => return Err(syntax(self.pos(), "hour or day")),
                    };
                    self.at += 1;
                    Some(b)
                } else {
                    None
                };
                QueryAst::Duration {
                    activity,
                    subject,
                    range,
                    bucket,
                }
            }
            Some("WHERE_MOST") => {
                self.at += 1;
                let (activity, subject, range) = self.activity_args()?;
                QueryAst::WhereMost {
                    activity,
                    subject,
                    range,
                }
            }
            _ => return Err(syntax(self.pos(), expected)),
        };
        if self.at < self.toks.len() {
            return Err(syntax(self.pos(), "end of query"));
        }
        Ok(ast)
    }
}

/// Parses one query. Positions in errors are byte offsets into `text`.
pub fn parse_query(text: &str) -> Result<QueryAst, QueryError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        at: 0,
        end: text.len(),
    };
    p.query()
}
